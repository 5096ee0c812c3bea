//! The fused kernel's prologue and the per-constituent body rewrites.

use crate::frontend::*;

use super::FuseError;

pub const GLOBAL_TID: &str = "global_tid";

/// Variables defined by the prologue, in declaration order.
pub const PROLOGUE_VARS: [&str; 11] = [
    GLOBAL_TID,
    "tid_1",
    "tid_2",
    "size_1",
    "size_2",
    "threadIdx_x",
    "threadIdx_y",
    "threadIdx_z",
    "blockDim_x",
    "blockDim_y",
    "blockDim_z",
];

fn at() -> Span {
    Span::default()
}

fn assign(name: &str, value: Expr) -> Stmt {
    Stmt::new(
        StmtKind::Assign {
            target: LValue::Var(name.to_string()),
            value,
        },
        at(),
    )
}

fn decl(name: &str) -> Stmt {
    Stmt::new(
        StmtKind::Decl(Decl {
            name: name.to_string(),
            ty: Ty::Int,
            storage: Storage::Local,
            init: None,
        }),
        at(),
    )
}

fn int(v: u32) -> Expr {
    Expr::int(v as i32)
}

fn bin(op: BinaryOp, l: Expr, r: Expr) -> Expr {
    Expr::binary(op, l, r)
}

/// `threadIdx.x + threadIdx.y * blockDim.x + threadIdx.z * blockDim.x * blockDim.y`
pub fn global_tid_expr() -> Expr {
    let b = |b: Builtin| Expr::builtin(b);
    let tx = b(Builtin::ThreadIdx(Axis::X));
    let ty = b(Builtin::ThreadIdx(Axis::Y));
    let tz = b(Builtin::ThreadIdx(Axis::Z));
    let dx = || b(Builtin::BlockDim(Axis::X));
    let dy = b(Builtin::BlockDim(Axis::Y));
    let row = bin(BinaryOp::Mul, ty, dx());
    let plane = bin(BinaryOp::Mul, bin(BinaryOp::Mul, tz, dx()), dy);
    bin(BinaryOp::Add, bin(BinaryOp::Add, tx, row), plane)
}

/// Row-major inverse of `local` against `dims`, as assignments to the
/// remapped thread-index and block-dimension variables.
fn remap(local: Expr, dims: Dims) -> Block {
    let mut out = vec![
        assign("blockDim_x", int(dims.x)),
        assign("blockDim_y", int(dims.y)),
        assign("blockDim_z", int(dims.z)),
    ];
    let x = if dims.y * dims.z == 1 {
        local.clone()
    } else {
        bin(BinaryOp::Rem, local.clone(), int(dims.x))
    };
    let y = if dims.y == 1 {
        int(0)
    } else {
        bin(BinaryOp::Rem, bin(BinaryOp::Div, local.clone(), int(dims.x)), int(dims.y))
    };
    let z = if dims.z == 1 {
        int(0)
    } else {
        bin(BinaryOp::Div, local, int(dims.x * dims.y))
    };
    out.push(assign("threadIdx_x", x));
    out.push(assign("threadIdx_y", y));
    out.push(assign("threadIdx_z", z));
    out
}

/// Declarations and assignments that recover each constituent's thread
/// index and block shape from the fused kernel's linear thread id. The
/// declarations form a leading prefix.
pub fn build_prologue(dims1: Dims, dims2: Dims, d1: u32) -> Result<Block, FuseError> {
    if dims1.product() != d1 {
        return Err(FuseError::DimensionMismatch { dims: dims1, threads: d1 });
    }
    let gt = || Expr::var(GLOBAL_TID);
    let mut out: Block = PROLOGUE_VARS.iter().map(|n| decl(n)).collect();
    out.push(assign(GLOBAL_TID, global_tid_expr()));
    out.push(assign("tid_1", gt()));
    out.push(assign("tid_2", bin(BinaryOp::Sub, gt(), int(d1))));
    out.push(assign("size_1", int(d1)));
    out.push(assign("size_2", int(dims2.product())));
    out.push(Stmt::new(
        StmtKind::If {
            cond: guard_first(d1),
            then_block: remap(gt(), dims1),
            else_block: Some(remap(bin(BinaryOp::Sub, gt(), int(d1)), dims2)),
        },
        at(),
    ));
    Ok(out)
}

/// `global_tid < d1`
pub fn guard_first(d1: u32) -> Expr {
    bin(BinaryOp::Lt, Expr::var(GLOBAL_TID), int(d1))
}

/// `global_tid >= d1`
pub fn guard_second(d1: u32) -> Expr {
    bin(BinaryOp::Ge, Expr::var(GLOBAL_TID), int(d1))
}

/// Redirects `threadIdx.*` and `blockDim.*` to the prologue's remapped
/// variables. Block and grid builtins are shared by both constituents.
pub fn rewrite_builtins(body: &[Stmt]) -> Block {
    let mut out = body.to_vec();
    walk_exprs_mut(&mut out, &mut |e| {
        if let ExprKind::Builtin(b) = e.kind {
            let name = match b {
                Builtin::ThreadIdx(a) => format!("threadIdx_{}", a.suffix()),
                Builtin::BlockDim(a) => format!("blockDim_{}", a.suffix()),
                Builtin::BlockIdx(_) | Builtin::GridDimX => return,
            };
            e.kind = ExprKind::Var(name);
        }
    });
    out
}

/// Turns every full-block barrier into a named barrier over `count` threads.
pub fn replace_barriers(body: &[Stmt], id: u32, count: u32) -> Result<Block, FuseError> {
    if id > 15 {
        return Err(FuseError::BadBarrierId(id));
    }
    if count == 0 || count % 32 != 0 {
        return Err(FuseError::MisalignedCount(count));
    }
    let mut out = body.to_vec();
    walk_stmts_mut(&mut out, &mut |s| {
        if s.kind == StmtKind::Barrier {
            s.kind = StmtKind::PartialBarrier { id, count };
        }
    });
    Ok(out)
}

/// Number of builtin occurrences the rewrite would redirect.
pub fn count_thread_builtins(body: &[Stmt]) -> usize {
    let mut n = 0;
    walk_exprs(body, &mut |e| {
        if matches!(
            e.kind,
            ExprKind::Builtin(Builtin::ThreadIdx(_) | Builtin::BlockDim(_))
        ) {
            n += 1;
        }
    });
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{run_functional, ArrayData, LaunchConfig, MemoryImage};

    /// Runs the prologue for every thread of a `d0`-thread block and returns
    /// (threadIdx_x, threadIdx_y, threadIdx_z, blockDim_x) per thread.
    fn eval(dims1: Dims, dims2: Dims, d1: u32) -> Vec<[i32; 4]> {
        let d0 = d1 + dims2.product();
        let mut body = build_prologue(dims1, dims2, d1).unwrap();
        for (i, v) in ["threadIdx_x", "threadIdx_y", "threadIdx_z", "blockDim_x"].iter().enumerate() {
            let idx = bin(
                BinaryOp::Add,
                bin(BinaryOp::Mul, Expr::var(GLOBAL_TID), int(4)),
                int(i as u32),
            );
            body.push(Stmt::new(
                StmtKind::Assign {
                    target: LValue::Index("out".into(), Box::new(idx)),
                    value: Expr::var(*v),
                },
                at(),
            ));
        }
        let k = Kernel {
            name: "p".into(),
            params: vec![Param {
                name: "out".into(),
                ty: ParamTy::Array(Ty::Int),
                len: Some(4 * d0),
                default: None,
                span: at(),
            }],
            block_dims: Dims::linear(d0),
            grid_dim: 1,
            tunable: true,
            regs: None,
            body,
            span: at(),
        };
        check_kernel(&k, &[]).unwrap();
        let mem = MemoryImage::new().with_array("out", ArrayData::zeros(Ty::Int, 4 * d0 as usize));
        let out = run_functional(&k, &[], &LaunchConfig::of(&k), &mem).unwrap();
        out.arrays["out"]
            .as_ints()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect()
    }

    #[test]
    fn three_dimensional_remap_inverts_row_major() {
        let dims1 = Dims::new(8, 4, 2);
        let got = eval(dims1, Dims::linear(64), 64);
        // Brute-force row-major enumeration.
        let mut t = 0;
        for z in 0..2 {
            for y in 0..4 {
                for x in 0..8 {
                    assert_eq!(got[t], [x, y, z, 8], "tid {t}");
                    t += 1;
                }
            }
        }
        assert_eq!(got[63], [7, 3, 1, 8]);
        for (i, g) in got[64..].iter().enumerate() {
            assert_eq!(*g, [i as i32, 0, 0, 64]);
        }
    }

    #[test]
    fn one_dimensional_remap_is_an_offset() {
        let p = build_prologue(Dims::linear(32), Dims::linear(32), 32).unwrap();
        let text = crate::frontend::Printer::new(Dialect::MiniKernel);
        let mut pr = text;
        pr.block_body(&p);
        assert!(pr.out.contains("threadIdx_x = global_tid;"));
        assert!(pr.out.contains("threadIdx_x = global_tid - 32;"));
        assert!(pr.out.contains("threadIdx_y = 0;"));
        assert!(pr.out.contains("threadIdx_z = 0;"));
    }

    #[test]
    fn two_dimensional_first_branch() {
        let p = build_prologue(Dims::new(56, 16, 1), Dims::linear(128), 896).unwrap();
        let StmtKind::If { then_block, else_block, .. } = &p.last().unwrap().kind else {
            panic!("prologue ends with the remap branch");
        };
        let has = |b: &Block, name: &str, v: i32| {
            b.iter().any(|s| {
                matches!(&s.kind, StmtKind::Assign { target: LValue::Var(n), value }
                    if n == name && *value == Expr::int(v))
            })
        };
        assert!(has(then_block, "blockDim_x", 56));
        assert!(has(then_block, "blockDim_y", 16));
        assert!(has(else_block.as_ref().unwrap(), "blockDim_x", 128));
        assert!(has(else_block.as_ref().unwrap(), "blockDim_y", 1));
    }

    #[test]
    fn prologue_rejects_wrong_product() {
        assert_eq!(
            build_prologue(Dims::new(56, 16, 1), Dims::linear(128), 864),
            Err(FuseError::DimensionMismatch {
                dims: Dims::new(56, 16, 1),
                threads: 864
            })
        );
    }

    #[test]
    fn builtins_are_redirected() {
        let p = parse_program(
            "kernel k(int a[64]) { int i; i = threadIdx.x + threadIdx.y * blockDim.x; a[i] = blockIdx.x + gridDim.x; }",
        )
        .unwrap();
        let body = rewrite_builtins(&p.kernels[0].body);
        let mut pr = Printer::new(Dialect::MiniKernel);
        pr.block_body(&body);
        assert!(pr.out.contains("i = threadIdx_x + threadIdx_y * blockDim_x;"), "{}", pr.out);
        assert!(pr.out.contains("blockIdx.x + gridDim.x"));
        assert_eq!(count_thread_builtins(&body), 0);
    }

    #[test]
    fn barriers_become_named() {
        let p = parse_program("kernel k() { syncthreads(); if (1) { syncthreads(); } }").unwrap();
        let b = replace_barriers(&p.kernels[0].body, 2, 128).unwrap();
        assert_eq!(count_stmts(&b, |k| *k == StmtKind::PartialBarrier { id: 2, count: 128 }), 2);
        assert_eq!(count_stmts(&b, |k| *k == StmtKind::Barrier), 0);
        assert_eq!(replace_barriers(&b, 2, 100), Err(FuseError::MisalignedCount(100)));
        assert_eq!(replace_barriers(&b, 16, 128), Err(FuseError::BadBarrierId(16)));
        let empty: Block = Vec::new();
        assert_eq!(replace_barriers(&empty, 1, 32).unwrap(), empty);
    }
}
