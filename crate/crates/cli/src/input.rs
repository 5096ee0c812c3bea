//! Loading kernels, machine configurations and memory images.

use std::fs;
use std::path::Path;

use kfuse_core::frontend::{parse_program, FrontendError, FuncDef, Kernel, Program};
use kfuse_core::machine::SMConfig;
use kfuse_core::sim::MemoryImage;

use crate::error::CliError;

pub fn read(path: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{path}: {e}")))
}

pub fn write(path: &str, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{path}: {e}")))
}

/// A kernel named by `path` or `path:name`, with the helpers of its file.
pub struct Loaded {
    pub path: String,
    pub program: Program,
    pub kernel: Kernel,
}

fn split_spec(spec: &str) -> (&str, Option<&str>) {
    if let Some((path, name)) = spec.rsplit_once(':') {
        let ident = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if ident && !Path::new(spec).exists() {
            return (path, Some(name));
        }
    }
    (spec, None)
}

pub fn load_program(path: &str) -> Result<Program, CliError> {
    let text = read(path)?;
    parse_program(&text).map_err(|e| CliError::Frontend {
        path: path.to_string(),
        error: e,
    })
}

pub fn load_kernel(spec: &str) -> Result<Loaded, CliError> {
    let (path, name) = split_spec(spec);
    let program = load_program(path)?;
    let kernel = match name {
        Some(n) => program
            .kernel(n)
            .cloned()
            .ok_or_else(|| CliError::Usage(format!("{path}: no kernel named `{n}`")))?,
        None => match program.kernels.as_slice() {
            [k] => k.clone(),
            [] => return Err(CliError::Usage(format!("{path}: file defines no kernel"))),
            ks => {
                let names: Vec<&str> = ks.iter().map(|k| k.name.as_str()).collect();
                return Err(CliError::Usage(format!(
                    "{path}: several kernels ({}); select one with {path}:NAME",
                    names.join(", ")
                )));
            }
        },
    };
    Ok(Loaded {
        path: path.to_string(),
        program,
        kernel,
    })
}

/// Helper functions of several files; a name defined twice must be defined
/// identically.
pub fn merged_functions(inputs: &[&Loaded]) -> Result<Vec<FuncDef>, CliError> {
    let mut out: Vec<FuncDef> = Vec::new();
    for l in inputs {
        for f in &l.program.functions {
            match out.iter().find(|g| g.name == f.name) {
                Some(g) if g == f => {}
                Some(_) => {
                    return Err(CliError::Frontend {
                        path: l.path.clone(),
                        error: FrontendError::DuplicateDefinition {
                            span: f.span,
                            name: f.name.clone(),
                        },
                    })
                }
                None => out.push(f.clone()),
            }
        }
    }
    Ok(out)
}

/// A preset name or a path to a flat `key = value` file.
pub fn load_sm(spec: &str) -> Result<SMConfig, CliError> {
    if Path::new(spec).is_file() {
        let text = read(spec)?;
        return SMConfig::from_toml(&text).map_err(CliError::Machine);
    }
    SMConfig::preset(spec).map_err(CliError::Machine)
}

/// An explicit image file when given, else seeded contents for every array
/// parameter of `kernels`.
pub fn load_memory(mem: Option<&str>, seed: u64, kernels: &[&Kernel]) -> Result<MemoryImage, CliError> {
    let mut image = match mem {
        Some(path) => MemoryImage::parse(&read(path)?).map_err(CliError::Sim)?,
        None => MemoryImage::new(),
    };
    for k in kernels {
        image.fill_params(&k.params, seed).map_err(CliError::Sim)?;
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_split_on_a_trailing_identifier() {
        assert_eq!(split_spec("a/b.mk:vector_add"), ("a/b.mk", Some("vector_add")));
        assert_eq!(split_spec("a/b.mk"), ("a/b.mk", None));
        assert_eq!(split_spec("c:/x.mk"), ("c:/x.mk", None));
    }
}
