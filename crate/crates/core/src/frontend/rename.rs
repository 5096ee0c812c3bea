//! Prefix renaming of locals, shared arrays and labels.

use std::collections::{BTreeMap, HashMap};

use super::ast::*;
use super::names::{declared_names, label_names, rename_block, NameGen};

/// Original name to new name, for both variables and labels.
pub type RenameMap = BTreeMap<String, String>;

/// Prefixes every declared name and label in the kernel body. Parameters keep
/// their names. A prefixed name that would collide with a parameter gets a
/// numeric suffix.
pub fn rename_locals(k: &Kernel, prefix: &str) -> (Kernel, RenameMap) {
    let mut names = NameGen::new();
    for p in &k.params {
        names.reserve(&p.name);
    }
    let mut vars = HashMap::new();
    for n in declared_names(&k.body) {
        let m = names.fresh(&format!("{prefix}{n}"));
        vars.insert(n, m);
    }
    let mut labels = HashMap::new();
    for l in label_names(&k.body) {
        let m = names.fresh(&format!("{prefix}{l}"));
        labels.insert(l, m);
    }
    let mut body = k.body.clone();
    rename_block(&mut body, &vars, &labels);
    let map = vars.into_iter().chain(labels).collect();
    (
        Kernel {
            body,
            ..k.clone()
        },
        map,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{parse_program, print_kernel};

    #[test]
    fn locals_and_shared_get_prefix() {
        let p = parse_program(
            "kernel k(float out[4]) dims(32,1,1) {
                shared float my_smem[32];
                float n = 1.0;
                float avg = n;
                my_smem[threadIdx.x] = avg;
                out[0] = my_smem[0];
            }",
        )
        .unwrap();
        let (k, map) = rename_locals(&p.kernels[0], "k2_");
        assert_eq!(map["n"], "k2_n");
        assert_eq!(map["avg"], "k2_avg");
        assert_eq!(map["my_smem"], "k2_my_smem");
        let text = print_kernel(&k);
        assert!(text.contains("k2_my_smem[threadIdx.x] = k2_avg;"), "{text}");
        assert!(text.contains("out[0] = k2_my_smem[0];"), "{text}");
    }

    #[test]
    fn collision_with_parameter_gets_suffix() {
        let p = parse_program("kernel k(int k1_x) dims(32,1,1) { int x = k1_x; }").unwrap();
        let (_, map) = rename_locals(&p.kernels[0], "k1_");
        assert_eq!(map["x"], "k1_x_1");
    }

    #[test]
    fn labels_are_prefixed() {
        let p = parse_program("kernel k() dims(32,1,1) { goto done; done: }").unwrap();
        let (k, map) = rename_locals(&p.kernels[0], "k1_");
        assert_eq!(map["done"], "k1_done");
        assert!(print_kernel(&k).contains("goto k1_done;"));
    }
}
