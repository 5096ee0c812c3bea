//! Acceptance checks, one line per criterion. Exits nonzero if any fails.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use kfuse_core::corpus;
use kfuse_core::frontend::{Kernel, Program};
use kfuse_core::fuser::{emit_source, fuse, guard_first, Style};
use kfuse_core::machine::{self, occupancy, register_bound, KernelResources, Resource, SMConfig};
use kfuse_core::search::{search, search_config, CapPolicy, SimBackend};
use kfuse_core::sim::{
    combined_utilization, detect_deadlock, run_functional, run_sequential, run_timed, DeadlockReport,
    LaunchConfig, MemoryImage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OCCUPANCY_BUDGET: Duration = Duration::from_millis(1);
const EQUIVALENCE_SEEDS: u64 = 20;
const EQUIVALENCE_BUDGET: Duration = Duration::from_secs(60);
const UTILIZATION_PAIRS: usize = 100;
const UTILIZATION_REL_TOL: f64 = 1e-12;
const HIDING_MAX_RATIO: f64 = 0.85;
const NO_HIDING_MIN_RATIO: f64 = 0.95;
const HIDING_BUDGET: Duration = Duration::from_secs(30);
const GOLDEN: &str = include_str!("../../core/tests/golden/batchnorm_histogram.cu");

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn program() -> Program {
    corpus::program().expect("corpus parses")
}

fn seeded(ks: &[&Kernel], seed: u64) -> MemoryImage {
    let mut mem = MemoryImage::new();
    for k in ks {
        mem.fill_params(&k.params, seed).expect("corpus params are seedable");
    }
    mem
}

/// A fixed kernel keeps its own size and the tunable side takes the rest of
/// 1024; two tunable kernels split unevenly.
fn partition(k1: &Kernel, k2: &Kernel) -> (u32, u32) {
    match (k1.tunable, k2.tunable) {
        (true, true) => (384, 640),
        (false, true) => (k1.threads_per_block(), 1024 - k1.threads_per_block()),
        (true, false) => (1024 - k2.threads_per_block(), k2.threads_per_block()),
        (false, false) => (k1.threads_per_block(), k2.threads_per_block()),
    }
}

fn occupancy_example() -> Outcome {
    let sm = SMConfig::default();
    let start = Instant::now();
    let a = occupancy(&KernelResources::new(64, 24576, 512), &sm).map_err(|e| e.to_string())?;
    let b = occupancy(&KernelResources::new(32, 24576, 512), &sm).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure(a.blocks_per_sm == 2, format!("64 regs gave {} blocks", a.blocks_per_sm))?;
    ensure(a.limiting_resource == Resource::Registers, format!("limited by {}", a.limiting_resource))?;
    ensure(b.blocks_per_sm == 4, format!("32 regs gave {} blocks", b.blocks_per_sm))?;
    ensure(took < OCCUPANCY_BUDGET, format!("took {took:?}"))?;
    Ok(format!("2 blocks (registers), then 4 blocks, {took:?}"))
}

fn motivating_structure() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    let (k1, k2) = (p.kernel("batchnorm").unwrap(), p.kernel("histogram").unwrap());
    let f = fuse(k1, k2, &p.functions, 896, 128, &sm).map_err(|e| e.to_string())?;
    let text = emit_source(&f, Style::Goto);
    let bars: Vec<&str> = text.lines().map(str::trim).filter(|l| l.contains("bar.sync")).collect();
    let ones = bars.iter().filter(|l| l.contains("bar.sync 1, 896;")).count();
    let twos = bars.iter().filter(|l| l.contains("bar.sync 2, 128;")).count();
    ensure(ones == 2 && twos == 2 && bars.len() == 4, format!("barrier lines {bars:?}"))?;
    ensure(text.contains("global_tid < 896"), "no guard at 896")?;
    ensure(text.contains("threadIdx_x = global_tid % 56;"), "first remap x")?;
    ensure(text.contains("threadIdx_y = global_tid / 56 % 16;"), "first remap y")?;
    ensure(text.contains("threadIdx_x = global_tid - 896;"), "second remap x")?;
    ensure(text == GOLDEN, "emitted text differs from the golden file")?;
    Ok("golden file matches byte for byte".into())
}

fn equivalence_suite() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    let start = Instant::now();
    let mut runs = 0;
    for (i, a) in corpus::EQUIVALENCE_SET.iter().enumerate() {
        for b in &corpus::EQUIVALENCE_SET[i + 1..] {
            let (k1, k2) = (p.kernel(a).unwrap(), p.kernel(b).unwrap());
            let (d1, d2) = partition(k1, k2);
            let f = fuse(k1, k2, &p.functions, d1, d2, &sm).map_err(|e| format!("{a}+{b}: {e}"))?;
            let fk = f.to_kernel();
            let s1 = kfuse_core::fuser::with_threads(k1, d1).map_err(|e| e.to_string())?;
            let s2 = kfuse_core::fuser::with_threads(k2, d2).map_err(|e| e.to_string())?;
            for seed in 0..EQUIVALENCE_SEEDS {
                let mem = seeded(&[k1, k2], seed);
                let fused = run_functional(&fk, &[], &LaunchConfig::of(&fk), &mem).map_err(|e| e.to_string())?;
                let seq = run_sequential(
                    &[(&s1, LaunchConfig::of(&s1)), (&s2, LaunchConfig::of(&s2))],
                    &p.functions,
                    &mem,
                )
                .map_err(|e| e.to_string())?;
                ensure(fused.digest() == seq.digest(), format!("{a}+{b} at ({d1},{d2}) seed {seed}"))?;
                runs += 1;
            }
        }
    }
    let took = start.elapsed();
    ensure(took < EQUIVALENCE_BUDGET, format!("took {took:?}"))?;
    Ok(format!("{runs} fused runs equal sequential, {:.1} s", took.as_secs_f64()))
}

fn register_bound_formula() -> Outcome {
    let sm = SMConfig::default();
    let oracle = |n1: u32, d1: u32, n2: u32, d2: u32, shm: u32| {
        let d0 = d1 + d2;
        let b0 = (sm.regs_per_sm / (d1 * n1))
            .min(sm.regs_per_sm / (d2 * n2))
            .min(if shm == 0 { u32::MAX } else { sm.shmem_per_sm / shm })
            .min(sm.max_threads_per_sm / d0);
        sm.regs_per_sm / (b0 * d0)
    };
    let cases = [(32, 896, 24, 128, 4096, 32), (16, 512, 16, 512, 0, 32), (16, 512, 16, 512, 90000, 64)];
    for (n1, d1, n2, d2, shm, want) in cases {
        let got = register_bound(
            &KernelResources::new(n1, 0, d1),
            &KernelResources::new(n2, 0, d2),
            shm,
            d1 + d2,
            &sm,
        )
        .map_err(|e| e.to_string())?;
        ensure(got == oracle(n1, d1, n2, d2, shm) && got == want, format!("({n1},{d1},{n2},{d2},{shm}) gave {got}"))?;
    }
    Ok("r0 = 32, 32, 64 as independently computed".into())
}

fn combined_utilization_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..UTILIZATION_PAIRS {
        let (i1, i2) = (rng.random::<f64>(), rng.random::<f64>());
        let (c1, c2) = (rng.random_range(1.0..1e7), rng.random_range(1.0..1e7));
        let direct = (i1 * c1 + i2 * c2) / (c1 + c2);
        let got = machine::combined_utilization(i1, c1, i2, c2);
        let rel = ((got - direct) / direct).abs();
        worst = worst.max(rel);
        ensure(rel <= UTILIZATION_REL_TOL, format!("relative error {rel:e}"))?;
        ensure(machine::combined_utilization(i1, c1, i1, c2) == i1, "fixed point not exact")?;
    }
    let (i1, i2) = (0.8718, 0.1446);
    ensure((machine::combined_utilization(i1, 100.0, i2, 100.0) - 0.5082).abs() < 1e-12, "equal-cycle example")?;
    Ok(format!("worst relative error {worst:.1e}, fixed point exact"))
}

/// Fused cycles over back-to-back cycles, and fused utilization against the
/// cycle-weighted utilization of the constituents.
fn fused_vs_sequential(p: &Program, a: &str, b: &str, sm: &SMConfig) -> Result<(f64, f64, f64), String> {
    let (k1, k2) = (p.kernel(a).unwrap(), p.kernel(b).unwrap());
    let (d1, d2) = partition(k1, k2);
    let f = fuse(k1, k2, &p.functions, d1, d2, sm).map_err(|e| e.to_string())?;
    let fk = f.to_kernel();
    let mem = seeded(&[k1, k2], 1);
    let (_, pf) = run_timed(&fk, &[], &LaunchConfig::of(&fk), sm, &mem).map_err(|e| e.to_string())?;
    let (mid, p1) = run_timed(k1, &p.functions, &LaunchConfig::of(k1), sm, &mem).map_err(|e| e.to_string())?;
    let (_, p2) = run_timed(k2, &p.functions, &LaunchConfig::of(k2), sm, &mid).map_err(|e| e.to_string())?;
    let ratio = pf.elapsed_cycles as f64 / (p1.elapsed_cycles + p2.elapsed_cycles) as f64;
    Ok((ratio, pf.issue_slot_utilization, combined_utilization(&p1, &p2)))
}

fn latency_hiding() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    ensure(sm.latencies.memory == 400 && sm.latencies.compute == 4, "preset latencies changed")?;
    let start = Instant::now();
    let (mixed, fused_util, seq_util) = fused_vs_sequential(&p, "mem_stream", "compute_hash", &sm)?;
    let (same, _, _) = fused_vs_sequential(&p, "compute_hash", "compute_hash", &sm)?;
    let took = start.elapsed();
    ensure(mixed <= HIDING_MAX_RATIO, format!("streamer+hasher ratio {mixed:.3}"))?;
    ensure(fused_util > seq_util, format!("utilization {fused_util:.3} vs {seq_util:.3}"))?;
    ensure(same >= NO_HIDING_MIN_RATIO, format!("hasher+hasher ratio {same:.3}"))?;
    ensure(took < HIDING_BUDGET, format!("took {took:?}"))?;
    Ok(format!(
        "streamer+hasher {mixed:.3} of sequential, utilization {fused_util:.3} > {seq_util:.3}; hasher+hasher {same:.3}"
    ))
}

fn register_cap_tradeoff() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    let (k1, k2) = (p.kernel("spill_a").unwrap(), p.kernel("spill_b").unwrap());
    let f = fuse(k1, k2, &p.functions, 512, 512, &sm).map_err(|e| e.to_string())?;
    let fk = f.to_kernel();
    let r0 = kfuse_core::search::register_bound_for(&f, k1, k2, &p.functions, &sm).map_err(|e| e.to_string())?;
    let shm = fk.shared_bytes();
    let uncapped = occupancy(&KernelResources::new(64, shm, 1024), &sm).map_err(|e| e.to_string())?;
    let capped = occupancy(&KernelResources::new(r0, shm, 1024), &sm).map_err(|e| e.to_string())?;
    ensure(uncapped.blocks_per_sm == 1, format!("uncapped runs {} blocks/SM", uncapped.blocks_per_sm))?;
    ensure(
        capped.occupancy_fraction > uncapped.occupancy_fraction,
        format!("occupancy {} vs {}", capped.occupancy_fraction, uncapped.occupancy_fraction),
    )?;
    let mem = seeded(&[k1, k2], 0);
    let launch = LaunchConfig::of(&fk).with_cap(Some(r0));
    let (_, prof) = run_timed(&fk, &[], &launch, &sm, &mem).map_err(|e| e.to_string())?;
    ensure(prof.spill_loads_stores > 0, "capped run did not spill")?;
    let r = search_config(k1, k2, &p.functions, 1024, &SimBackend { seed: 0 }, &sm).map_err(|e| e.to_string())?;
    let at = |cap: Option<u32>| r.trace.iter().find(|t| t.config.d1 == 512 && t.config.reg_cap == cap);
    ensure(at(None).is_some() && at(Some(r0)).is_some(), "trace lacks a variant at 512")?;
    let min = r.trace.iter().map(|t| t.cycles).min().unwrap();
    ensure(r.best_time == min, "winner is not cycle-minimal")?;
    Ok(format!(
        "cap {r0}: occupancy {:.3} > {:.3}, {} spills; winner d1 = {} cap {:?} at {} cycles",
        capped.occupancy_fraction, uncapped.occupancy_fraction, prof.spill_loads_stores,
        r.best_config.d1, r.best_config.reg_cap, r.best_time
    ))
}

fn deadlock_detection() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    let (k1, k2) = (p.kernel("batchnorm").unwrap(), p.kernel("histogram").unwrap());
    let f = fuse(k1, k2, &p.functions, 896, 128, &sm).map_err(|e| e.to_string())?;
    let mem = seeded(&[k1, k2], 0);
    let fk = f.to_kernel();
    let clean = detect_deadlock(&fk, &[], &LaunchConfig::of(&fk), &mem).map_err(|e| e.to_string())?;
    ensure(clean == DeadlockReport::Clean, format!("correct fusion reported {clean}"))?;
    let mut bad = f.clone();
    bad.blocks[0].guard = guard_first(864);
    let bk = bad.to_kernel();
    let report = detect_deadlock(&bk, &[], &LaunchConfig::of(&bk), &mem).map_err(|e| e.to_string())?;
    match report {
        DeadlockReport::Deadlock { id: 1, arrived: 864, expected: 896, .. } => {
            Ok("barrier 1: arrived 864, expected 896".into())
        }
        other => Err(format!("got {other}")),
    }
}

fn search_completeness() -> Outcome {
    let p = program();
    let sm = SMConfig::pascal_like();
    let backend = SimBackend { seed: 0 };
    let (k1, k2) = (p.kernel("batchnorm").unwrap(), p.kernel("histogram").unwrap());
    let r = search(k1, k2, &p.functions, 1024, CapPolicy::Auto, &backend, &sm).map_err(|e| e.to_string())?;
    ensure(r.trace.len() == 14, format!("{} entries", r.trace.len()))?;
    ensure(r.best_time == r.trace.iter().map(|t| t.cycles).min().unwrap(), "best is not the minimum")?;
    let h = p.kernel("compute_hash").unwrap();
    let fixed = search(h, h, &p.functions, 1024, CapPolicy::Auto, &backend, &sm).map_err(|e| e.to_string())?;
    ensure(fixed.trace.len() == 2, format!("fixed pair has {} entries", fixed.trace.len()))?;
    ensure(
        fixed.trace.iter().all(|t| t.config.d1 == 512 && t.config.d2 == 512),
        "fixed pair is not split evenly",
    )?;
    Ok(format!(
        "14 entries, best ({}, {}) at {} cycles; fixed pair 2 entries at (512, 512)",
        r.best_config.d1, r.best_config.d2, r.best_time
    ))
}

fn kfuse(args: &[&str]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kfuse"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok((out.stdout, out.stderr))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus_dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "core", "corpus"].iter().collect();
    let src = |n: &str| corpus_dir.join(format!("{n}.mk")).to_string_lossy().into_owned();
    let out = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let (bn, hg, va) = (src("batchnorm"), src("histogram"), src("vector_add"));
    let (ms, ch) = (src("mem_stream"), src("compute_hash"));
    let commands: Vec<(Vec<String>, Vec<String>)> = vec![
        (vec!["check".into(), bn.clone(), hg.clone()], vec![]),
        (vec!["fuse".into(), bn.clone(), hg.clone(), "--d1".into(), "896".into(), "--d2".into(), "128".into()], vec![]),
        (vec!["simulate".into(), va.clone(), "--seed".into(), "42".into(), "--dump".into(), out("mem.txt")], vec![out("mem.txt")]),
        (vec!["simulate".into(), ms.clone(), ch.clone(), "--sequential".into()], vec![]),
        (vec!["occupancy".into(), hg.clone()], vec![]),
        (
            vec!["search".into(), bn, hg, "--trace".into(), out("trace.csv"), "-o".into(), out("best.cu")],
            vec![out("trace.csv"), out("best.cu")],
        ),
    ];
    for (args, files) in &commands {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let read = || -> Result<Vec<Vec<u8>>, String> {
            files.iter().map(|f| std::fs::read(f).map_err(|e| e.to_string())).collect()
        };
        let first = kfuse(&argv)?;
        let first_files = read()?;
        let second = kfuse(&argv)?;
        let second_files = read()?;
        ensure(first == second && first_files == second_files, format!("`{}` differs between runs", args[0]))?;
    }
    Ok(format!("{} commands byte-identical across runs", commands.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("occupancy worked example", occupancy_example),
        ("motivating fusion structure", motivating_structure),
        ("semantic equivalence suite", equivalence_suite),
        ("register bound formula", register_bound_formula),
        ("combined utilization formula", combined_utilization_formula),
        ("latency hiding", latency_hiding),
        ("register cap trade-off", register_cap_tradeoff),
        ("barrier deadlock detection", deadlock_detection),
        ("search completeness", search_completeness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
