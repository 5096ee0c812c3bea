//! Horizontal fusion of Mini-Kernel GPU kernels, with an SM simulator used as
//! both semantic oracle and profiler.

pub mod corpus;
pub mod frontend;
pub mod fuser;
pub mod machine;
pub mod search;
pub mod sim;

pub use frontend::{normalize, parse_program, Dims, FrontendError, FuncDef, Kernel, Program};
pub use fuser::{emit_source, fuse, BarrierTable, FuseError, FusedKernel, FusionConfig, Style};
pub use machine::{occupancy, register_bound, KernelResources, OccupancyReport, SMConfig};
pub use search::{
    fixed_partition_fuse, search, search_config, CapPolicy, CommandBackend, ProfilerBackend, SearchError,
    SearchResult, SimBackend,
};
pub use sim::{
    combined_utilization, detect_deadlock, run_functional, run_sequential, run_timed,
    DeadlockReport, LaunchConfig, MemoryImage, ProfileResult, SimError,
};
