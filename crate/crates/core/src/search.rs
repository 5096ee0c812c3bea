//! Exhaustive search over fusion partitions and the register cap.
//!
//! Every candidate `(d1, d0 - d1)` at a granularity of 128 threads is
//! profiled twice, once uncapped and once capped at the register bound that
//! keeps as many fused blocks resident as the constituents would allow.

use std::fmt;
use std::io::Write as _;
use std::process::Command;

use rayon::prelude::*;
use thiserror::Error;

use crate::frontend::{normalize, FrontendError, FuncDef, Kernel};
use crate::fuser::{emit_source, generate_fused, FuseError, FusedKernel, FusionConfig, Style};
use crate::machine::{estimate_registers, register_bound, KernelResources, MachineError, SMConfig};
use crate::sim::{run_timed, LaunchConfig, MemoryImage, SimError};

pub const GRANULARITY: u32 = 128;
pub const DEFAULT_D0: u32 = 1024;

/// Which capped variant accompanies each uncapped candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapPolicy {
    /// The register bound of the partition.
    #[default]
    Auto,
    /// No capped variant.
    Off,
    Fixed(u32),
}

impl std::str::FromStr for CapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(CapPolicy::Auto),
            "off" => Ok(CapPolicy::Off),
            n => match n.parse::<u32>() {
                Ok(v) if v > 0 => Ok(CapPolicy::Fixed(v)),
                _ => Err(format!("invalid register cap `{s}` (expected a positive number, auto or off)")),
            },
        }
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("fused block size {d0} must be a multiple of {GRANULARITY} between {lo} and {hi}")]
    BadBlockSize { d0: u32, lo: u32, hi: u32 },
    #[error("`{0}` has fixed block dimensions; use the fixed-partition path")]
    NotTunable(String),
    #[error("neither kernel has fixed block dimensions")]
    NoFixedKernel,
    #[error("fixed block dimensions {d1} + {d2} threads cannot share a block of at most {limit}")]
    IncompatibleFixedDims { d1: u32, d2: u32, limit: u32 },
    #[error("no candidate configuration could be generated (last error: {0})")]
    NothingFeasible(String),
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Fuse(#[from] FuseError),
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error("profiling {config} failed: {source}")]
    Simulation {
        config: FusionConfig,
        #[source]
        source: SimError,
    },
    #[error("profiler command failed: {0}")]
    Command(String),
}

/// What a backend reports for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub cycles: u64,
    pub occupancy: Option<f64>,
    pub utilization: Option<f64>,
}

/// Times one fused kernel. Implementations must not depend on evaluation
/// order, since candidates are profiled concurrently.
pub trait ProfilerBackend: Sync {
    fn evaluate(&self, f: &FusedKernel, sm: &SMConfig) -> Result<Measurement, SearchError>;
}

/// Profiles on the timed simulator with seeded inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct SimBackend {
    pub seed: u64,
}

impl ProfilerBackend for SimBackend {
    fn evaluate(&self, f: &FusedKernel, sm: &SMConfig) -> Result<Measurement, SearchError> {
        let k = f.to_kernel();
        let wrap = |source| SearchError::Simulation {
            config: f.config,
            source,
        };
        let mem = MemoryImage::seeded(&k.params, self.seed).map_err(wrap)?;
        let launch = LaunchConfig::of(&k).with_cap(f.config.reg_cap);
        let (_, p) = run_timed(&k, &[], &launch, sm, &mem).map_err(wrap)?;
        Ok(Measurement {
            cycles: p.elapsed_cycles,
            occupancy: Some(p.achieved_occupancy),
            utilization: Some(p.issue_slot_utilization),
        })
    }
}

/// Runs a user command on the goto-style source of each candidate and takes
/// the last integer printed on stdout as its cycle count.
///
/// The source path is appended as the final argument; the configuration is
/// passed in `KFUSE_D1`, `KFUSE_D2` and `KFUSE_REG_CAP` (empty when uncapped).
#[derive(Debug, Clone)]
pub struct CommandBackend {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandBackend {
    /// Splits a command line with shell quoting rules; `None` when empty or
    /// badly quoted.
    pub fn parse(line: &str) -> Option<Self> {
        let mut words = shlex::split(line)?.into_iter();
        let program = words.next()?;
        Some(CommandBackend {
            program,
            args: words.collect(),
        })
    }
}

fn last_integer(text: &str) -> Option<u64> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|w| !w.is_empty())
        .last()
        .and_then(|w| w.parse().ok())
}

impl ProfilerBackend for CommandBackend {
    fn evaluate(&self, f: &FusedKernel, _sm: &SMConfig) -> Result<Measurement, SearchError> {
        let io = |e: std::io::Error| SearchError::Command(e.to_string());
        let mut file = tempfile::Builder::new().suffix(".cu").tempfile().map_err(io)?;
        file.write_all(emit_source(f, Style::Goto).as_bytes()).map_err(io)?;
        file.flush().map_err(io)?;
        let cap = f.config.reg_cap.map(|r| r.to_string()).unwrap_or_default();
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .env("KFUSE_D1", f.config.d1.to_string())
            .env("KFUSE_D2", f.config.d2.to_string())
            .env("KFUSE_REG_CAP", cap)
            .output()
            .map_err(io)?;
        if !out.status.success() {
            return Err(SearchError::Command(format!(
                "`{}` exited with {}",
                self.program, out.status
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let cycles = last_integer(&stdout).ok_or_else(|| {
            SearchError::Command(format!("`{}` printed no cycle count", self.program))
        })?;
        Ok(Measurement {
            cycles,
            occupancy: None,
            utilization: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub config: FusionConfig,
    pub cycles: u64,
    pub occupancy: Option<f64>,
    pub utilization: Option<f64>,
}

impl TracePoint {
    fn rank(&self) -> (u64, u32, bool) {
        (self.cycles, self.config.d1, self.config.reg_cap.is_some())
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best_kernel: FusedKernel,
    pub best_config: FusionConfig,
    pub best_time: u64,
    /// One entry per successfully profiled candidate, in sweep order.
    pub trace: Vec<TracePoint>,
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let ratio = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        w.write_record(["d1", "d2", "reg_cap", "cycles", "occupancy", "utilization"])
            .expect("in-memory write");
        for t in &self.trace {
            let cap = t.config.reg_cap.map(|r| r.to_string()).unwrap_or_else(|| "none".into());
            w.write_record([
                t.config.d1.to_string(),
                t.config.d2.to_string(),
                cap,
                t.cycles.to_string(),
                ratio(t.occupancy),
                ratio(t.utilization),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

impl fmt::Display for SearchResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kernel = {}", self.best_kernel.name)?;
        writeln!(f, "d1 = {}", self.best_config.d1)?;
        writeln!(f, "d2 = {}", self.best_config.d2)?;
        match self.best_config.reg_cap {
            Some(r) => writeln!(f, "reg_cap = {r}")?,
            None => writeln!(f, "reg_cap = none")?,
        }
        writeln!(f, "cycles = {}", self.best_time)?;
        writeln!(f, "evaluated = {}", self.trace.len())
    }
}

/// Kernels normalized once for the whole sweep.
struct Prepared {
    k1: Kernel,
    k2: Kernel,
    regs1: u32,
    regs2: u32,
}

fn prepare(k1: &Kernel, k2: &Kernel, funcs: &[FuncDef]) -> Result<Prepared, SearchError> {
    let (n1, _) = normalize(k1, funcs, "k1_")?;
    let (n2, _) = normalize(k2, funcs, "k2_")?;
    Ok(Prepared {
        regs1: estimate_registers(&n1),
        regs2: estimate_registers(&n2),
        k1: n1,
        k2: n2,
    })
}

fn bound(p: &Prepared, f: &FusedKernel, sm: &SMConfig) -> Result<u32, MachineError> {
    let c = f.config;
    let r1 = KernelResources::new(p.regs1, p.k1.shared_bytes(), c.d1);
    let r2 = KernelResources::new(p.regs2, p.k2.shared_bytes(), c.d2);
    register_bound(&r1, &r2, f.shared_bytes(), c.d0, sm)
}

/// The register bound for a fused kernel built from `k1` and `k2`.
pub fn register_bound_for(
    f: &FusedKernel,
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    sm: &SMConfig,
) -> Result<u32, SearchError> {
    let p = prepare(k1, k2, funcs)?;
    Ok(bound(&p, f, sm)?)
}

/// The uncapped and capped candidates at one partition, or the reason the
/// partition cannot be generated.
fn candidates(
    p: &Prepared,
    d1: u32,
    d2: u32,
    caps: CapPolicy,
    sm: &SMConfig,
) -> Result<Vec<FusedKernel>, SearchError> {
    let f = generate_fused(&p.k1, &p.k2, d1, d2, sm)?;
    let r0 = match caps {
        CapPolicy::Off => return Ok(vec![f]),
        CapPolicy::Fixed(r) => r,
        CapPolicy::Auto => bound(p, &f, sm)?,
    };
    let mut capped = f.clone();
    capped.config = f.config.with_cap(Some(r0));
    Ok(vec![f, capped])
}

fn evaluate_all(
    p: &Prepared,
    splits: &[(u32, u32)],
    caps: CapPolicy,
    backend: &dyn ProfilerBackend,
    sm: &SMConfig,
) -> Result<SearchResult, SearchError> {
    let mut last_err = None;
    let mut pending = Vec::new();
    for &(d1, d2) in splits {
        match candidates(p, d1, d2, caps, sm) {
            Ok(c) => pending.extend(c),
            Err(e) => last_err = Some(e),
        }
    }
    if pending.is_empty() {
        let why = last_err.map(|e| e.to_string()).unwrap_or_else(|| "no partitions".into());
        return Err(SearchError::NothingFeasible(why));
    }
    let measured: Vec<Measurement> = pending
        .par_iter()
        .map(|f| backend.evaluate(f, sm))
        .collect::<Result<_, _>>()?;
    let trace: Vec<TracePoint> = pending
        .iter()
        .zip(&measured)
        .map(|(f, m)| TracePoint {
            config: f.config,
            cycles: m.cycles,
            occupancy: m.occupancy,
            utilization: m.utilization,
        })
        .collect();
    let best = (0..trace.len())
        .min_by_key(|&i| trace[i].rank())
        .expect("trace is non-empty");
    Ok(SearchResult {
        best_kernel: pending[best].clone(),
        best_config: trace[best].config,
        best_time: trace[best].cycles,
        trace,
    })
}

/// Sweeps `d1` over multiples of `step` strictly between 0 and `d0`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    d0: u32,
    step: u32,
    caps: CapPolicy,
    backend: &dyn ProfilerBackend,
    sm: &SMConfig,
) -> Result<SearchResult, SearchError> {
    for k in [k1, k2] {
        if !k.tunable {
            return Err(SearchError::NotTunable(k.name.clone()));
        }
    }
    let hi = sm.max_threads_per_block.min(sm.max_threads_per_sm);
    if step == 0 || d0 % step != 0 || d0 < 2 * step || d0 > hi {
        return Err(SearchError::BadBlockSize { d0, lo: 2 * step, hi });
    }
    let p = prepare(k1, k2, funcs)?;
    let splits: Vec<(u32, u32)> = (1..d0 / step).map(|i| (i * step, d0 - i * step)).collect();
    evaluate_all(&p, &splits, caps, backend, sm)
}

/// Searches `d1 = 128, 256, ..., d0 - 128`, with and without the register
/// bound. Ties go to the smaller `d1`, then to the uncapped variant.
pub fn search_config(
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    d0: u32,
    backend: &dyn ProfilerBackend,
    sm: &SMConfig,
) -> Result<SearchResult, SearchError> {
    sweep(k1, k2, funcs, d0, GRANULARITY, CapPolicy::Auto, backend, sm)
}

/// Single-partition search when at least one kernel has fixed block
/// dimensions: a fixed kernel keeps its thread count and a tunable partner
/// takes the rest of `d0`.
pub fn fixed_partition_fuse(
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    d0: u32,
    caps: CapPolicy,
    backend: &dyn ProfilerBackend,
    sm: &SMConfig,
) -> Result<SearchResult, SearchError> {
    let limit = sm.max_threads_per_block.min(sm.max_threads_per_sm);
    let t1 = k1.threads_per_block();
    let t2 = k2.threads_per_block();
    let (d1, d2) = match (k1.tunable, k2.tunable) {
        (true, true) => return Err(SearchError::NoFixedKernel),
        (false, false) => (t1, t2),
        (false, true) => (t1, d0.saturating_sub(t1)),
        (true, false) => (d0.saturating_sub(t2), t2),
    };
    if d1 == 0 || d2 == 0 || d1 + d2 > limit {
        return Err(SearchError::IncompatibleFixedDims {
            d1: if k1.tunable { d0 - d2.min(d0) } else { t1 },
            d2: if k2.tunable { d0 - d1.min(d0) } else { t2 },
            limit,
        });
    }
    let p = prepare(k1, k2, funcs)?;
    evaluate_all(&p, &[(d1, d2)], caps, backend, sm)
}

/// Dispatches to the sweep or the fixed-partition path.
pub fn search(
    k1: &Kernel,
    k2: &Kernel,
    funcs: &[FuncDef],
    d0: u32,
    caps: CapPolicy,
    backend: &dyn ProfilerBackend,
    sm: &SMConfig,
) -> Result<SearchResult, SearchError> {
    if k1.tunable && k2.tunable {
        sweep(k1, k2, funcs, d0, GRANULARITY, caps, backend, sm)
    } else {
        fixed_partition_fuse(k1, k2, funcs, d0, caps, backend, sm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::parse_program;
    use crate::frontend::Program;

    const PAIR: &str = "
        kernel a(int x[2048], int y[2048]) dims(64,1,1) grid(2) {
            int i;
            for (i = blockIdx.x * blockDim.x + threadIdx.x; i < 2048; i = i + blockDim.x * gridDim.x) {
                y[i] = x[i] * 7 + 1;
            }
        }
        kernel b(int u[64]) dims(32,1,1) grid(2) {
            shared int s[32];
            int j;
            j = threadIdx.x % 32;
            s[j] = u[j];
            syncthreads();
            u[j] = s[j] + 1;
        }
        kernel f(int w[1024]) dims(512,1,1) fixed grid(2) {
            w[threadIdx.x] = threadIdx.x;
        }
        kernel g(int z[1024]) dims(512,1,1) fixed grid(2) {
            z[threadIdx.x] = 2;
        }
        kernel big() dims(896,1,1) fixed grid(2) { }
        kernel small() dims(256,1,1) fixed grid(2) { }";

    fn prog() -> Program {
        parse_program(PAIR).unwrap()
    }

    fn sm() -> SMConfig {
        SMConfig {
            num_sms: 1,
            ..SMConfig::default()
        }
    }

    /// Fixed-answer backend: cycles depend only on the configuration.
    struct Table;

    impl ProfilerBackend for Table {
        fn evaluate(&self, f: &FusedKernel, _: &SMConfig) -> Result<Measurement, SearchError> {
            let c = f.config;
            let cycles = match (c.d1, c.reg_cap) {
                (384, None) => 10,
                (256, Some(_)) => 10,
                (d1, _) => 100 + u64::from(d1),
            };
            Ok(Measurement {
                cycles,
                occupancy: None,
                utilization: None,
            })
        }
    }

    #[test]
    fn trace_covers_every_split_twice() {
        let p = prog();
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 1024, &SimBackend::default(), &sm()).unwrap();
        assert_eq!(r.trace.len(), 14);
        for (i, t) in r.trace.iter().enumerate() {
            assert_eq!(t.config.d1, 128 * (i as u32 / 2 + 1));
            assert_eq!(t.config.reg_cap.is_some(), i % 2 == 1);
        }
        assert_eq!(r.best_time, r.trace.iter().map(|t| t.cycles).min().unwrap());
        assert_eq!(r.best_kernel.config, r.best_config);
        // The winner reproduces its time.
        let again = SimBackend::default().evaluate(&r.best_kernel, &sm()).unwrap();
        assert_eq!(again.cycles, r.best_time);
    }

    #[test]
    fn smallest_block_has_one_split() {
        let p = prog();
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 256, &Table, &sm()).unwrap();
        assert_eq!(r.trace.len(), 2);
        assert_eq!((r.trace[0].config.d1, r.trace[0].config.d2), (128, 128));
    }

    #[test]
    fn ties_prefer_smaller_d1_then_no_cap() {
        let p = prog();
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 1024, &Table, &sm()).unwrap();
        assert_eq!(r.best_time, 10);
        assert_eq!(r.best_config.d1, 256);
        assert!(r.best_config.reg_cap.is_some());

        struct Flat;
        impl ProfilerBackend for Flat {
            fn evaluate(&self, _: &FusedKernel, _: &SMConfig) -> Result<Measurement, SearchError> {
                Ok(Measurement { cycles: 5, occupancy: None, utilization: None })
            }
        }
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 512, &Flat, &sm()).unwrap();
        assert_eq!(r.best_config.d1, 128);
        assert_eq!(r.best_config.reg_cap, None);
    }

    #[test]
    fn coarse_winner_matches_fine_sweep_on_aligned_points() {
        let p = prog();
        let b = SimBackend { seed: 3 };
        let coarse = search_config(&p.kernels[0], &p.kernels[1], &[], 512, &b, &sm()).unwrap();
        let fine = sweep(&p.kernels[0], &p.kernels[1], &[], 512, 32, CapPolicy::Auto, &b, &sm()).unwrap();
        assert_eq!(fine.trace.len(), 2 * 15);
        let aligned = fine
            .trace
            .iter()
            .filter(|t| t.config.d1 % 128 == 0)
            .map(|t| t.cycles)
            .min()
            .unwrap();
        assert_eq!(coarse.best_time, aligned);
        assert!(fine.best_time <= coarse.best_time);
    }

    #[test]
    fn bad_block_sizes_are_rejected() {
        let p = prog();
        for d0 in [128, 1000, 2048] {
            assert!(matches!(
                search_config(&p.kernels[0], &p.kernels[1], &[], d0, &Table, &sm()),
                Err(SearchError::BadBlockSize { .. })
            ));
        }
        assert!(matches!(
            search_config(&p.kernels[2], &p.kernels[1], &[], 1024, &Table, &sm()),
            Err(SearchError::NotTunable(_))
        ));
    }

    #[test]
    fn fixed_pairs_split_evenly() {
        let p = prog();
        let r = fixed_partition_fuse(&p.kernels[2], &p.kernels[3], &[], 1024, CapPolicy::Auto, &Table, &sm()).unwrap();
        assert_eq!(r.trace.len(), 2);
        assert!(r.trace.iter().all(|t| (t.config.d1, t.config.d2) == (512, 512)));

        let e = fixed_partition_fuse(&p.kernels[4], &p.kernels[5], &[], 1024, CapPolicy::Auto, &Table, &sm()).unwrap_err();
        assert!(matches!(e, SearchError::IncompatibleFixedDims { d1: 896, d2: 256, limit: 1024 }), "{e}");

        let r = search(&p.kernels[2], &p.kernels[0], &[], 1024, CapPolicy::Auto, &Table, &sm()).unwrap();
        assert!(r.trace.iter().all(|t| (t.config.d1, t.config.d2) == (512, 512)));
        let r = search(&p.kernels[0], &p.kernels[4], &[], 1024, CapPolicy::Auto, &Table, &sm()).unwrap();
        assert!(r.trace.iter().all(|t| (t.config.d1, t.config.d2) == (128, 896)));
    }

    #[test]
    fn cap_policies_shape_the_trace() {
        let p = prog();
        let run = |caps| search(&p.kernels[0], &p.kernels[1], &[], 512, caps, &Table, &sm()).unwrap();
        let off = run(CapPolicy::Off);
        assert_eq!(off.trace.len(), 3);
        assert!(off.trace.iter().all(|t| t.config.reg_cap.is_none()));
        let fixed = run(CapPolicy::Fixed(20));
        assert_eq!(fixed.trace.len(), 6);
        assert!(fixed.trace.iter().skip(1).step_by(2).all(|t| t.config.reg_cap == Some(20)));
        assert_eq!("auto".parse(), Ok(CapPolicy::Auto));
        assert_eq!("off".parse(), Ok(CapPolicy::Off));
        assert_eq!("24".parse(), Ok(CapPolicy::Fixed(24)));
        assert!("0".parse::<CapPolicy>().is_err());
        assert!("lots".parse::<CapPolicy>().is_err());
    }

    #[test]
    fn nothing_feasible_when_shared_memory_never_fits() {
        let p = parse_program(
            "kernel a() dims(64,1,1) { shared int s[20000]; s[0] = 1; }
             kernel b() dims(64,1,1) { shared int t[20000]; t[0] = 1; }",
        )
        .unwrap();
        let e = search_config(&p.kernels[0], &p.kernels[1], &[], 512, &Table, &sm()).unwrap_err();
        assert!(matches!(e, SearchError::NothingFeasible(_)), "{e}");
    }

    #[test]
    fn csv_has_header_and_none_for_uncapped() {
        let p = prog();
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 256, &SimBackend::default(), &sm()).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "d1,d2,reg_cap,cycles,occupancy,utilization");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("128,128,none,"));
        assert!(!lines[2].contains("none"));
    }

    #[test]
    fn last_integer_is_the_cycle_count() {
        assert_eq!(last_integer("warmup 3\nelapsed: 1234 cycles\n"), Some(1234));
        assert_eq!(last_integer("no numbers"), None);
        let b = CommandBackend::parse("  prof --runs 3 ").unwrap();
        assert_eq!((b.program.as_str(), b.args.len()), ("prof", 2));
        assert!(CommandBackend::parse("   ").is_none());
        let q = CommandBackend::parse("sh -c 'echo $X 1'").unwrap();
        assert_eq!(q.args, ["-c", "echo $X 1"]);
        assert!(CommandBackend::parse("sh -c 'open").is_none());
    }

    #[cfg(unix)]
    #[test]
    fn command_backend_reads_stdout() {
        let p = prog();
        // `sh -c CMD path` runs CMD with $0 = path.
        let b = CommandBackend {
            program: "sh".into(),
            args: vec!["-c".into(), "echo cycles $KFUSE_D1".into()],
        };
        let r = search_config(&p.kernels[0], &p.kernels[1], &[], 384, &b, &sm()).unwrap();
        assert_eq!(r.best_time, 128);
        assert_eq!(r.trace.len(), 4);
    }
}
