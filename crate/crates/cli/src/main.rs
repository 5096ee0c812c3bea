//! `kfuse`: fuse, simulate and search Mini-Kernel GPU kernels.

mod commands;
mod error;
mod input;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfuse_core::fuser::Style;
use kfuse_core::search::{CapPolicy, DEFAULT_D0};

#[derive(Parser, Debug)]
#[command(name = "kfuse", version, about = "Horizontal fusion of Mini-Kernel GPU kernels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct MachineArgs {
    /// SM preset (pascal-like, volta-like) or a key = value config file.
    #[arg(long, default_value = "pascal-like")]
    sm: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fuse two kernels at a fixed partition and emit the fused source.
    Fuse {
        /// First kernel, as FILE or FILE:NAME.
        k1: String,
        /// Second kernel, as FILE or FILE:NAME.
        k2: String,
        /// Threads for the first kernel (default: its declared block size).
        #[arg(long)]
        d1: Option<u32>,
        /// Threads for the second kernel (default: its declared block size).
        #[arg(long)]
        d2: Option<u32>,
        #[arg(long, default_value = "goto", value_parser = parse_style)]
        style: Style,
        /// Register cap recorded with the fused kernel: a number, auto or off.
        #[arg(long, default_value = "off")]
        regcap: CapPolicy,
        /// Write the fused source here instead of standard output.
        #[arg(short, long)]
        output: Option<String>,
        #[command(flatten)]
        machine: MachineArgs,
    },
    /// Run one kernel, or two back to back, on the timed simulator.
    Simulate {
        /// Kernel to run, as FILE or FILE:NAME.
        kernel: String,
        /// Second kernel for --sequential runs.
        second: Option<String>,
        /// Run both kernels one after the other on the same memory.
        #[arg(long)]
        sequential: bool,
        /// Threads for the first kernel (default: its declared block size).
        #[arg(long)]
        d1: Option<u32>,
        /// Threads for the second kernel (default: its declared block size).
        #[arg(long)]
        d2: Option<u32>,
        /// Seed for array contents not given by --mem.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial memory image file.
        #[arg(long)]
        mem: Option<String>,
        /// Register cap for the run: a number or off.
        #[arg(long, default_value = "off")]
        regcap: CapPolicy,
        /// Write the final memory image here.
        #[arg(long)]
        dump: Option<String>,
        #[command(flatten)]
        machine: MachineArgs,
    },
    /// Search partitions and register caps for the fastest fusion.
    Search {
        k1: String,
        k2: String,
        /// Fused block size.
        #[arg(long, default_value_t = DEFAULT_D0)]
        d0: u32,
        /// Capped variant per partition: auto (register bound), off or a number.
        #[arg(long, default_value = "auto")]
        regcap: CapPolicy,
        /// Seed for the simulator's input memory.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full trace as CSV.
        #[arg(long)]
        trace: Option<String>,
        /// Write the winning fused source.
        #[arg(short, long)]
        output: Option<String>,
        #[arg(long, default_value = "goto", value_parser = parse_style)]
        style: Style,
        /// Profile with an external command instead of the simulator; it
        /// receives the source path last and prints a cycle count.
        #[arg(long)]
        profiler: Option<String>,
        #[command(flatten)]
        machine: MachineArgs,
    },
    /// Blocks per SM for a kernel or for explicit resources.
    Occupancy {
        /// Kernel whose resources are estimated, as FILE or FILE:NAME.
        kernel: Option<String>,
        #[arg(long)]
        regs: Option<u32>,
        /// Shared memory per block in bytes.
        #[arg(long)]
        shmem: Option<u32>,
        #[arg(long)]
        threads: Option<u32>,
        #[command(flatten)]
        machine: MachineArgs,
    },
    /// Parse, check and lint source files.
    Check {
        #[arg(required = true)]
        files: Vec<String>,
    },
}

fn parse_style(s: &str) -> Result<Style, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            eprint!("{}", out.stderr);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
