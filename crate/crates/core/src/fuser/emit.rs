//! Source emission for fused kernels.
//!
//! `Structured` prints reparseable Mini-Kernel with two guarded `if` blocks.
//! `Goto` prints CUDA-flavored text in which each constituent is skipped by
//! a guard `goto` to a label at its end, and named barriers appear as inline
//! `bar.sync` assembly.

use std::str::FromStr;

use crate::frontend::*;

use super::FusedKernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Structured,
    Goto,
}

impl FromStr for Style {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "structured" => Ok(Style::Structured),
            "goto" => Ok(Style::Goto),
            _ => Err(format!("unknown style `{s}` (expected structured or goto)")),
        }
    }
}

pub fn emit_source(f: &FusedKernel, style: Style) -> String {
    match style {
        Style::Structured => print_kernel(&f.to_kernel()),
        Style::Goto => emit_goto(f),
    }
}

fn emit_goto(f: &FusedKernel) -> String {
    let k = f.to_kernel();
    let mut names = NameGen::for_kernel(&k);
    let end1 = names.fresh("K1_end");
    let end2 = names.fresh("K2_end");
    let d1 = f.config.d1;

    let mut p = Printer::new(Dialect::Cuda);
    let head = format!("__global__ void {}({}) {{", k.name, p.params(&k.params));
    p.line(&head);
    let guarded = k.body.len() - 2;
    p.indented(|p| {
        for s in &k.body[..guarded] {
            p.stmt(s);
        }
        p.line(&format!("if (!({GLOBAL} < {d1})) goto {end1};", GLOBAL = super::GLOBAL_TID));
        for s in &f.blocks[0].body {
            p.stmt(s);
        }
        p.outdented_line(&format!("{end1}:"));
        p.line(&format!("if ({GLOBAL} < {d1}) goto {end2};", GLOBAL = super::GLOBAL_TID));
        for s in &f.blocks[1].body {
            p.stmt(s);
        }
        p.outdented_line(&format!("{end2}:"));
    });
    p.line("}");
    p.out
}
