//! Byte-exact emission of the batchnorm/histogram fusion.
//!
//! Set `KFUSE_BLESS=1` to rewrite the golden file after an intended change.

use std::path::PathBuf;

use kfuse_core::corpus;
use kfuse_core::fuser::{emit_source, fuse, Style};
use kfuse_core::machine::SMConfig;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/batchnorm_histogram.cu")
}

fn emitted() -> String {
    let p = corpus::program().unwrap();
    let k1 = p.kernel("batchnorm").unwrap();
    let k2 = p.kernel("histogram").unwrap();
    let f = fuse(k1, k2, &p.functions, 896, 128, &SMConfig::default()).unwrap();
    emit_source(&f, Style::Goto)
}

#[test]
fn goto_emission_matches_golden_file() {
    let text = emitted();
    if std::env::var_os("KFUSE_BLESS").is_some() {
        std::fs::write(golden_path(), &text).unwrap();
    }
    let want = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(text, want);
}

#[test]
fn golden_file_has_the_expected_barriers_and_guard() {
    let want = std::fs::read_to_string(golden_path()).unwrap();
    assert_eq!(want.matches("asm(\"bar.sync 1, 896;\");").count(), 2);
    assert_eq!(want.matches("asm(\"bar.sync 2, 128;\");").count(), 2);
    assert_eq!(want.matches("bar.sync").count(), 4);
    assert!(want.contains("if (!(global_tid < 896)) goto K1_end;"));
    assert!(want.contains("if (global_tid < 896) goto K2_end;"));
    assert!(want.contains("global_tid = threadIdx.x + threadIdx.y * blockDim.x + threadIdx.z * blockDim.x * blockDim.y;"));
    assert!(want.contains("threadIdx_x = global_tid % 56;"));
    assert!(want.contains("threadIdx_y = global_tid / 56 % 16;"));
    assert!(want.contains("threadIdx_x = global_tid - 896;"));
}
