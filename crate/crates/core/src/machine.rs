//! SM resource model: machine constants, occupancy arithmetic, the register
//! bound used by the configuration search, and register estimation.

use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::frontend::{FuncDef, Kernel};
use crate::sim::ir;

/// Registers charged to every thread on top of live locals.
pub const REGISTER_OVERHEAD: u32 = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MachineError {
    #[error("kernel does not fit on an SM: {resource} allows 0 blocks")]
    DoesNotFit { resource: Resource },
    #[error("invalid machine configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid kernel resources: {0}")]
    InvalidResources(String),
    #[error("unknown SM preset `{0}` (expected pascal-like or volta-like)")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct Latencies {
    pub compute: u32,
    pub memory: u32,
    pub shuffle: u32,
    pub atomic: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SMConfig {
    pub regs_per_sm: u32,
    pub shmem_per_sm: u32,
    pub max_threads_per_sm: u32,
    pub max_threads_per_block: u32,
    pub warp_size: u32,
    pub max_blocks_per_sm: u32,
    pub num_sms: u32,
    pub issue_slots: u32,
    pub mem_slots_per_cycle: u32,
    pub latencies: Latencies,
}

impl Default for SMConfig {
    fn default() -> Self {
        SMConfig::pascal_like()
    }
}

/// Flat key-value form of [`SMConfig`]; absent keys come from `base`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SmFile {
    base: Option<String>,
    regs_per_sm: Option<u32>,
    shmem_per_sm: Option<u32>,
    max_threads_per_sm: Option<u32>,
    max_threads_per_block: Option<u32>,
    warp_size: Option<u32>,
    max_blocks_per_sm: Option<u32>,
    num_sms: Option<u32>,
    issue_slots: Option<u32>,
    mem_slots_per_cycle: Option<u32>,
    compute_latency: Option<u32>,
    memory_latency: Option<u32>,
    shuffle_latency: Option<u32>,
    atomic_latency: Option<u32>,
}

impl SMConfig {
    pub const PRESETS: [&'static str; 2] = ["pascal-like", "volta-like"];

    pub fn pascal_like() -> Self {
        SMConfig {
            regs_per_sm: 65536,
            shmem_per_sm: 98304,
            max_threads_per_sm: 2048,
            max_threads_per_block: 1024,
            warp_size: 32,
            max_blocks_per_sm: 32,
            num_sms: 4,
            issue_slots: 4,
            mem_slots_per_cycle: 1,
            latencies: Latencies {
                compute: 4,
                memory: 400,
                shuffle: 8,
                atomic: 200,
            },
        }
    }

    pub fn volta_like() -> Self {
        SMConfig {
            latencies: Latencies {
                compute: 4,
                memory: 300,
                shuffle: 6,
                atomic: 150,
            },
            ..SMConfig::pascal_like()
        }
    }

    pub fn preset(name: &str) -> Result<Self, MachineError> {
        match name {
            "pascal-like" => Ok(SMConfig::pascal_like()),
            "volta-like" => Ok(SMConfig::volta_like()),
            _ => Err(MachineError::UnknownPreset(name.to_string())),
        }
    }

    /// Parses a flat `key = value` file. A `base` key names the preset that
    /// supplies missing values (default pascal-like).
    pub fn from_toml(text: &str) -> Result<Self, MachineError> {
        let f: SmFile = toml::from_str(text).map_err(|e| MachineError::InvalidConfig(e.to_string()))?;
        let base = SMConfig::preset(f.base.as_deref().unwrap_or("pascal-like"))?;
        let c = SMConfig {
            regs_per_sm: f.regs_per_sm.unwrap_or(base.regs_per_sm),
            shmem_per_sm: f.shmem_per_sm.unwrap_or(base.shmem_per_sm),
            max_threads_per_sm: f.max_threads_per_sm.unwrap_or(base.max_threads_per_sm),
            max_threads_per_block: f.max_threads_per_block.unwrap_or(base.max_threads_per_block),
            warp_size: f.warp_size.unwrap_or(base.warp_size),
            max_blocks_per_sm: f.max_blocks_per_sm.unwrap_or(base.max_blocks_per_sm),
            num_sms: f.num_sms.unwrap_or(base.num_sms),
            issue_slots: f.issue_slots.unwrap_or(base.issue_slots),
            mem_slots_per_cycle: f.mem_slots_per_cycle.unwrap_or(base.mem_slots_per_cycle),
            latencies: Latencies {
                compute: f.compute_latency.unwrap_or(base.latencies.compute),
                memory: f.memory_latency.unwrap_or(base.latencies.memory),
                shuffle: f.shuffle_latency.unwrap_or(base.latencies.shuffle),
                atomic: f.atomic_latency.unwrap_or(base.latencies.atomic),
            },
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), MachineError> {
        let counts = [
            ("regs_per_sm", self.regs_per_sm),
            ("shmem_per_sm", self.shmem_per_sm),
            ("max_threads_per_sm", self.max_threads_per_sm),
            ("max_threads_per_block", self.max_threads_per_block),
            ("warp_size", self.warp_size),
            ("max_blocks_per_sm", self.max_blocks_per_sm),
            ("num_sms", self.num_sms),
            ("issue_slots", self.issue_slots),
            ("mem_slots_per_cycle", self.mem_slots_per_cycle),
            ("compute_latency", self.latencies.compute),
            ("memory_latency", self.latencies.memory),
            ("shuffle_latency", self.latencies.shuffle),
            ("atomic_latency", self.latencies.atomic),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(MachineError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.warp_size != 32 {
            return Err(MachineError::InvalidConfig(
                "only 32-lane warps are modeled".to_string(),
            ));
        }
        if self.max_threads_per_block % self.warp_size != 0 {
            return Err(MachineError::InvalidConfig(
                "warp_size must divide max_threads_per_block".to_string(),
            ));
        }
        Ok(())
    }

    pub fn max_warps_per_sm(&self) -> u32 {
        self.max_threads_per_sm / self.warp_size
    }

    /// The configuration in the same flat format accepted by [`from_toml`](Self::from_toml).
    pub fn to_toml(&self) -> String {
        format!(
            "regs_per_sm = {}\nshmem_per_sm = {}\nmax_threads_per_sm = {}\nmax_threads_per_block = {}\n\
             warp_size = {}\nmax_blocks_per_sm = {}\nnum_sms = {}\nissue_slots = {}\nmem_slots_per_cycle = {}\n\
             compute_latency = {}\nmemory_latency = {}\nshuffle_latency = {}\natomic_latency = {}\n",
            self.regs_per_sm,
            self.shmem_per_sm,
            self.max_threads_per_sm,
            self.max_threads_per_block,
            self.warp_size,
            self.max_blocks_per_sm,
            self.num_sms,
            self.issue_slots,
            self.mem_slots_per_cycle,
            self.latencies.compute,
            self.latencies.memory,
            self.latencies.shuffle,
            self.latencies.atomic,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelResources {
    pub regs_per_thread: u32,
    pub shmem_per_block: u32,
    pub threads_per_block: u32,
}

impl KernelResources {
    pub fn new(regs_per_thread: u32, shmem_per_block: u32, threads_per_block: u32) -> Self {
        KernelResources {
            regs_per_thread,
            shmem_per_block,
            threads_per_block,
        }
    }
}

/// The resource bounding blocks per SM. Declaration order is the tie-break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Resource {
    Registers,
    SharedMemory,
    Threads,
    BlockSlots,
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Resource::Registers => "registers",
            Resource::SharedMemory => "shared_memory",
            Resource::Threads => "threads",
            Resource::BlockSlots => "block_slots",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyReport {
    pub blocks_per_sm: u32,
    pub limiting_resource: Resource,
    pub achieved_warps: u32,
    pub occupancy_fraction: f64,
}

impl fmt::Display for OccupancyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "blocks_per_sm = {}", self.blocks_per_sm)?;
        writeln!(f, "limiting_resource = {}", self.limiting_resource)?;
        writeln!(f, "achieved_warps = {}", self.achieved_warps)?;
        writeln!(f, "occupancy_fraction = {:.6}", self.occupancy_fraction)
    }
}

/// Per-resource block quotients in [`Resource`] order. Zero shared memory
/// leaves that quotient unbounded.
pub fn block_quotients(r: &KernelResources, sm: &SMConfig) -> Result<[u32; 4], MachineError> {
    if r.regs_per_thread == 0 || r.threads_per_block == 0 {
        return Err(MachineError::InvalidResources(
            "registers and threads per block must be positive".to_string(),
        ));
    }
    let regs = u64::from(sm.regs_per_sm) / (u64::from(r.regs_per_thread) * u64::from(r.threads_per_block));
    let shmem = if r.shmem_per_block == 0 {
        u32::MAX
    } else {
        sm.shmem_per_sm / r.shmem_per_block
    };
    Ok([
        regs.min(u64::from(u32::MAX)) as u32,
        shmem,
        sm.max_threads_per_sm / r.threads_per_block,
        sm.max_blocks_per_sm,
    ])
}

pub fn occupancy(r: &KernelResources, sm: &SMConfig) -> Result<OccupancyReport, MachineError> {
    let q = block_quotients(r, sm)?;
    let resources = [
        Resource::Registers,
        Resource::SharedMemory,
        Resource::Threads,
        Resource::BlockSlots,
    ];
    let (i, &blocks) = q
        .iter()
        .enumerate()
        .min_by_key(|(i, v)| (**v, *i))
        .expect("four quotients");
    if blocks == 0 {
        return Err(MachineError::DoesNotFit {
            resource: resources[i],
        });
    }
    let warps_per_block = r.threads_per_block.div_ceil(sm.warp_size);
    Ok(OccupancyReport {
        blocks_per_sm: blocks,
        limiting_resource: resources[i],
        achieved_warps: blocks * warps_per_block,
        occupancy_fraction: f64::from(blocks) * f64::from(r.threads_per_block)
            / f64::from(sm.max_threads_per_sm),
    })
}

/// Register cap that lets the fused kernel keep as many resident blocks as
/// the two constituents would, given fused shared memory and thread limits.
pub fn register_bound(
    r1: &KernelResources,
    r2: &KernelResources,
    fused_shmem: u32,
    d0: u32,
    sm: &SMConfig,
) -> Result<u32, MachineError> {
    let per = |r: &KernelResources| -> Result<u32, MachineError> {
        let denom = u64::from(r.threads_per_block) * u64::from(r.regs_per_thread);
        if denom == 0 {
            return Err(MachineError::InvalidResources(
                "registers and threads per block must be positive".to_string(),
            ));
        }
        Ok((u64::from(sm.regs_per_sm) / denom) as u32)
    };
    if d0 == 0 {
        return Err(MachineError::InvalidResources("d0 must be positive".to_string()));
    }
    let b1 = per(r1)?;
    let b2 = per(r2)?;
    let shmem_q = if fused_shmem == 0 {
        u32::MAX
    } else {
        sm.shmem_per_sm / fused_shmem
    };
    let threads_q = sm.max_threads_per_sm / d0;
    let b0 = b1.min(b2).min(shmem_q).min(threads_q);
    if b0 == 0 {
        let resource = if b1.min(b2) == 0 {
            Resource::Registers
        } else if shmem_q == 0 {
            Resource::SharedMemory
        } else {
            Resource::Threads
        };
        return Err(MachineError::DoesNotFit { resource });
    }
    Ok(sm.regs_per_sm / (b0 * d0))
}

/// Cycle-weighted average of two issue-slot utilizations,
/// `(i1 * c1 + i2 * c2) / (c1 + c2)`, written so equal inputs come back
/// unchanged.
pub fn combined_utilization(i1: f64, c1: f64, i2: f64, c2: f64) -> f64 {
    i1 + (i2 - i1) * (c2 / (c1 + c2))
}

/// Registers per thread: the kernel's `regs(N)` annotation if present,
/// otherwise the peak number of simultaneously live locals plus a fixed
/// overhead.
pub fn estimate_registers(k: &Kernel) -> u32 {
    estimate_registers_with(k, &[])
}

/// As [`estimate_registers`] for a kernel that may still call helpers.
pub fn estimate_registers_with(k: &Kernel, funcs: &[FuncDef]) -> u32 {
    if let Some(r) = k.regs {
        return r;
    }
    match ir::lower(k, funcs) {
        Ok(p) => p.max_live_locals() + REGISTER_OVERHEAD,
        // Unlowerable kernels are rejected elsewhere; count every local.
        Err(_) => {
            let mut n = 0;
            crate::frontend::walk_stmts(&k.body, &mut |s| {
                if matches!(&s.kind, crate::frontend::StmtKind::Decl(d) if d.storage == crate::frontend::Storage::Local) {
                    n += 1;
                }
            });
            n + REGISTER_OVERHEAD
        }
    }
}

pub fn kernel_resources(k: &Kernel) -> KernelResources {
    KernelResources {
        regs_per_thread: estimate_registers(k),
        shmem_per_block: k.shared_bytes(),
        threads_per_block: k.threads_per_block(),
    }
}
