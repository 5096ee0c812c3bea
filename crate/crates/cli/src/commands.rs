use std::fmt::Write as _;

use kfuse_core::frontend::{lint_program, normalize, Kernel};
use kfuse_core::fuser::{emit_source, fuse, with_threads, FusedKernel};
use kfuse_core::machine::{estimate_registers, kernel_resources, occupancy, KernelResources, SMConfig};
use kfuse_core::search::{self, register_bound_for, CapPolicy, CommandBackend, ProfilerBackend, SimBackend};
use kfuse_core::sim::{combined_utilization, run_timed, LaunchConfig, MemoryImage, ProfileResult};

use crate::error::CliError;
use crate::input::{load_kernel, load_memory, load_program, load_sm, merged_functions, write, Loaded};
use crate::Command;

/// Text for standard output and for standard error.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub stderr: String,
}

impl Output {
    fn report(stdout: String) -> Self {
        Output {
            stdout,
            stderr: String::new(),
        }
    }
}

pub fn run(cmd: Command) -> Result<Output, CliError> {
    match cmd {
        Command::Fuse {
            k1,
            k2,
            d1,
            d2,
            style,
            regcap,
            output,
            machine,
        } => {
            let sm = load_sm(&machine.sm)?;
            let (a, b) = (load_kernel(&k1)?, load_kernel(&k2)?);
            let funcs = merged_functions(&[&a, &b])?;
            let d1 = d1.unwrap_or_else(|| a.kernel.threads_per_block());
            let d2 = d2.unwrap_or_else(|| b.kernel.threads_per_block());
            let mut f = fuse(&a.kernel, &b.kernel, &funcs, d1, d2, &sm)?;
            let cap = match regcap {
                CapPolicy::Off => None,
                CapPolicy::Fixed(r) => Some(r),
                CapPolicy::Auto => Some(register_bound_for(&f, &a.kernel, &b.kernel, &funcs, &sm)?),
            };
            f.config = f.config.with_cap(cap);
            let source = emit_source(&f, style);
            let summary = fuse_summary(&f, &sm)?;
            match output {
                Some(path) => {
                    write(&path, &source)?;
                    Ok(Output::report(format!("output = {path}\n{summary}")))
                }
                None => Ok(Output {
                    stdout: source,
                    stderr: summary,
                }),
            }
        }
        Command::Simulate {
            kernel,
            second,
            sequential,
            d1,
            d2,
            seed,
            mem,
            regcap,
            dump,
            machine,
        } => {
            let sm = load_sm(&machine.sm)?;
            let cap = match regcap {
                CapPolicy::Off => None,
                CapPolicy::Fixed(r) => Some(r),
                CapPolicy::Auto => {
                    return Err(CliError::Usage(
                        "--regcap auto needs a kernel pair; use `fuse` or `search`".into(),
                    ))
                }
            };
            let first = load_kernel(&kernel)?;
            let mut kernels = vec![first];
            match (second, sequential) {
                (Some(s), true) => kernels.push(load_kernel(&s)?),
                (None, false) => {}
                (Some(_), false) => {
                    return Err(CliError::Usage("two kernels need --sequential".into()))
                }
                (None, true) => {
                    return Err(CliError::Usage("--sequential needs a second kernel".into()))
                }
            }
            let refs: Vec<&Loaded> = kernels.iter().collect();
            let funcs = merged_functions(&refs)?;
            let mut shaped = Vec::new();
            for (l, d) in kernels.iter().zip([d1, d2]) {
                shaped.push(match d {
                    Some(t) => with_threads(&l.kernel, t)?,
                    None => l.kernel.clone(),
                });
            }
            let ks: Vec<&Kernel> = shaped.iter().collect();
            let mut image = load_memory(mem.as_deref(), seed, &ks)?;
            let mut profiles: Vec<(String, ProfileResult)> = Vec::new();
            for k in &shaped {
                let launch = LaunchConfig::of(k).with_cap(cap);
                let (next, p) = run_timed(k, &funcs, &launch, &sm, &image)?;
                image = next;
                profiles.push((k.name.clone(), p));
            }
            if let Some(path) = &dump {
                write(path, &image.to_text())?;
            }
            Ok(Output::report(simulate_report(&profiles, &image)))
        }
        Command::Search {
            k1,
            k2,
            d0,
            regcap,
            seed,
            trace,
            output,
            style,
            profiler,
            machine,
        } => {
            let sm = load_sm(&machine.sm)?;
            let (a, b) = (load_kernel(&k1)?, load_kernel(&k2)?);
            let funcs = merged_functions(&[&a, &b])?;
            let sim = SimBackend { seed };
            let cmd;
            let backend: &dyn ProfilerBackend = match &profiler {
                Some(line) => {
                    cmd = CommandBackend::parse(line)
                        .ok_or_else(|| CliError::Usage("--profiler needs a command".into()))?;
                    &cmd
                }
                None => &sim,
            };
            let r = search::search(&a.kernel, &b.kernel, &funcs, d0, regcap, backend, &sm)?;
            let mut out = r.to_string();
            if let Some(path) = &trace {
                write(path, &r.to_csv())?;
                let _ = writeln!(out, "trace = {path}");
            }
            if let Some(path) = &output {
                write(path, &emit_source(&r.best_kernel, style))?;
                let _ = writeln!(out, "output = {path}");
            }
            Ok(Output::report(out))
        }
        Command::Occupancy {
            kernel,
            regs,
            shmem,
            threads,
            machine,
        } => {
            let sm = load_sm(&machine.sm)?;
            let base = match &kernel {
                Some(spec) => {
                    let l = load_kernel(spec)?;
                    let (n, _) = normalize(&l.kernel, &l.program.functions, "")
                        .map_err(|e| CliError::Frontend {
                            path: l.path.clone(),
                            error: e,
                        })?;
                    Some(kernel_resources(&n))
                }
                None => None,
            };
            let pick = |flag: Option<u32>, from: Option<u32>, name: &str| {
                flag.or(from)
                    .ok_or_else(|| CliError::Usage(format!("--{name} is required without a kernel")))
            };
            let r = KernelResources::new(
                pick(regs, base.map(|b| b.regs_per_thread), "regs")?,
                pick(shmem, base.map(|b| b.shmem_per_block), "shmem")?,
                pick(threads, base.map(|b| b.threads_per_block), "threads")?,
            );
            let rep = occupancy(&r, &sm)?;
            Ok(Output::report(format!(
                "regs_per_thread = {}\nshmem_per_block = {}\nthreads_per_block = {}\n{rep}",
                r.regs_per_thread, r.shmem_per_block, r.threads_per_block
            )))
        }
        Command::Check { files } => {
            let mut out = String::new();
            for path in &files {
                let p = load_program(path)?;
                let _ = writeln!(
                    out,
                    "{path}: ok ({} kernels, {} functions)",
                    p.kernels.len(),
                    p.functions.len()
                );
                for w in lint_program(&p) {
                    let _ = writeln!(out, "{path}:{w}");
                }
            }
            Ok(Output::report(out))
        }
    }
}

fn fuse_summary(f: &FusedKernel, sm: &SMConfig) -> Result<String, CliError> {
    let k = f.to_kernel();
    let regs = estimate_registers(&k);
    let effective = f.config.reg_cap.map_or(regs, |c| c.min(regs));
    let occ = occupancy(&KernelResources::new(effective, k.shared_bytes(), f.config.d0), sm)?;
    let mut s = String::new();
    let _ = writeln!(s, "kernel = {}", f.name);
    let _ = writeln!(s, "d1 = {}", f.config.d1);
    let _ = writeln!(s, "d2 = {}", f.config.d2);
    let _ = writeln!(s, "d0 = {}", f.config.d0);
    let _ = writeln!(s, "dims1 = {}", f.blocks[0].dims);
    let _ = writeln!(s, "dims2 = {}", f.blocks[1].dims);
    match f.config.reg_cap {
        Some(r) => {
            let _ = writeln!(s, "reg_cap = {r}");
        }
        None => s.push_str("reg_cap = none\n"),
    }
    let _ = writeln!(s, "regs_per_thread = {regs}");
    let _ = writeln!(s, "shared_bytes = {}", k.shared_bytes());
    let _ = writeln!(s, "blocks_per_sm = {}", occ.blocks_per_sm);
    let _ = writeln!(s, "limiting_resource = {}", occ.limiting_resource);
    let _ = write!(s, "{}", f.barriers);
    Ok(s)
}

fn simulate_report(profiles: &[(String, ProfileResult)], image: &MemoryImage) -> String {
    let mut s = String::new();
    for (name, p) in profiles {
        let _ = writeln!(s, "kernel = {name}");
        let _ = write!(s, "{p}");
    }
    if let [(_, a), (_, b)] = profiles {
        let _ = writeln!(s, "total_elapsed_cycles = {}", a.elapsed_cycles + b.elapsed_cycles);
        let _ = writeln!(s, "combined_issue_slot_utilization = {:.6}", combined_utilization(a, b));
    }
    let _ = writeln!(s, "digest = {}", image.digest());
    s
}
