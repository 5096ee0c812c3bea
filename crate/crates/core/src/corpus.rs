//! Built-in kernel corpus used by the tests, benches and CLI examples.

use crate::frontend::{parse_program, FrontendError, Program};

/// `(file stem, source)` for every corpus file.
pub const FILES: [(&str, &str); 9] = [
    ("vector_add", include_str!("../corpus/vector_add.mk")),
    ("strided_sum", include_str!("../corpus/strided_sum.mk")),
    ("histogram", include_str!("../corpus/histogram.mk")),
    ("batchnorm", include_str!("../corpus/batchnorm.mk")),
    ("shuffle_reduce", include_str!("../corpus/shuffle_reduce.mk")),
    ("mem_stream", include_str!("../corpus/mem_stream.mk")),
    ("compute_hash", include_str!("../corpus/compute_hash.mk")),
    ("empty", include_str!("../corpus/empty.mk")),
    ("spill_pair", include_str!("../corpus/spill_pair.mk")),
];

/// The eight kernels fused pairwise in equivalence testing.
pub const EQUIVALENCE_SET: [&str; 8] = [
    "vector_add",
    "strided_sum",
    "histogram",
    "batchnorm",
    "shuffle_reduce",
    "mem_stream",
    "compute_hash",
    "empty",
];

pub fn source(stem: &str) -> Option<&'static str> {
    FILES.iter().find(|(n, _)| *n == stem).map(|(_, s)| *s)
}

/// Every corpus file concatenated and parsed as one program.
pub fn program() -> Result<Program, FrontendError> {
    let text: String = FILES.iter().map(|(_, s)| *s).collect::<Vec<_>>().join("\n");
    parse_program(&text)
}
