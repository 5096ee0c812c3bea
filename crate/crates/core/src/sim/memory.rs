//! Global memory images: named typed arrays plus scalar argument values.
//!
//! Text format, one entry per line (`#` starts a comment):
//!
//! ```text
//! array NAME int|float LEN values V1 V2 ...
//! array NAME int|float LEN random SEED
//! array NAME int|float LEN fill V
//! scalar NAME int|float V
//! ```

use std::collections::BTreeMap;
use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::frontend::{Literal, Param, ParamTy, Ty};

use super::SimError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayData {
    pub ty: Ty,
    /// Element bit patterns.
    pub data: Vec<u32>,
}

impl ArrayData {
    pub fn ints(values: &[i32]) -> Self {
        ArrayData {
            ty: Ty::Int,
            data: values.iter().map(|v| *v as u32).collect(),
        }
    }

    pub fn floats(values: &[f32]) -> Self {
        ArrayData {
            ty: Ty::Float,
            data: values.iter().map(|v| v.to_bits()).collect(),
        }
    }

    pub fn zeros(ty: Ty, len: usize) -> Self {
        ArrayData {
            ty,
            data: vec![0; len],
        }
    }

    pub fn as_ints(&self) -> Vec<i32> {
        self.data.iter().map(|v| *v as i32).collect()
    }

    pub fn as_floats(&self) -> Vec<f32> {
        self.data.iter().map(|v| f32::from_bits(*v)).collect()
    }

    /// Deterministic contents: ints in `[0, 1024)`, floats in `[0, 1)`.
    pub fn random(ty: Ty, len: usize, seed: u64, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(name.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        let data = (0..len)
            .map(|_| match ty {
                Ty::Int => rng.random_range(0..1024i32) as u32,
                Ty::Float => rng.random::<f32>().to_bits(),
            })
            .collect();
        ArrayData { ty, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryImage {
    pub arrays: BTreeMap<String, ArrayData>,
    /// Scalar kernel arguments as (type, bit pattern).
    pub scalars: BTreeMap<String, (Ty, u32)>,
}

fn literal_bits(l: Literal) -> (Ty, u32) {
    match l {
        Literal::Int(v) => (Ty::Int, v as u32),
        Literal::Float(v) => (Ty::Float, v.to_bits()),
    }
}

fn fmt_value(ty: Ty, bits: u32) -> String {
    match ty {
        Ty::Int => (bits as i32).to_string(),
        Ty::Float => format!("{:?}", f32::from_bits(bits)),
    }
}

fn parse_value(ty: Ty, s: &str) -> Option<u32> {
    match ty {
        Ty::Int => s.parse::<i32>().ok().map(|v| v as u32),
        Ty::Float => s.parse::<f32>().ok().map(f32::to_bits),
    }
}

fn parse_ty(s: &str) -> Option<Ty> {
    match s {
        "int" => Some(Ty::Int),
        "float" => Some(Ty::Float),
        _ => None,
    }
}

impl MemoryImage {
    pub fn new() -> Self {
        MemoryImage::default()
    }

    pub fn with_array(mut self, name: &str, a: ArrayData) -> Self {
        self.arrays.insert(name.to_string(), a);
        self
    }

    pub fn with_scalar(mut self, name: &str, value: Literal) -> Self {
        self.scalars.insert(name.to_string(), literal_bits(value));
        self
    }

    pub fn array(&self, name: &str) -> Option<&ArrayData> {
        self.arrays.get(name)
    }

    /// Seeded contents for every parameter not already present. Array
    /// parameters need a declared length; scalars take their default.
    pub fn fill_params(&mut self, params: &[Param], seed: u64) -> Result<(), SimError> {
        for p in params {
            match p.ty {
                ParamTy::Array(t) => {
                    if self.arrays.contains_key(&p.name) {
                        continue;
                    }
                    let len = p.len.ok_or_else(|| SimError::UnknownLength(p.name.clone()))?;
                    self.arrays
                        .insert(p.name.clone(), ArrayData::random(t, len as usize, seed, &p.name));
                }
                ParamTy::Scalar(_) => {
                    if self.scalars.contains_key(&p.name) {
                        continue;
                    }
                    let d = p.default.ok_or_else(|| SimError::MissingScalar(p.name.clone()))?;
                    self.scalars.insert(p.name.clone(), literal_bits(d));
                }
            }
        }
        Ok(())
    }

    pub fn seeded(params: &[Param], seed: u64) -> Result<Self, SimError> {
        let mut m = MemoryImage::new();
        m.fill_params(params, seed)?;
        Ok(m)
    }

    /// SHA-256 over all arrays in name order, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, a) in &self.arrays {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(a.ty.keyword().as_bytes());
            h.update((a.data.len() as u64).to_le_bytes());
            for v in &a.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, a) in &self.arrays {
            let _ = write!(out, "array {name} {} {} values", a.ty, a.data.len());
            for v in &a.data {
                out.push(' ');
                out.push_str(&fmt_value(a.ty, *v));
            }
            out.push('\n');
        }
        for (name, (ty, v)) in &self.scalars {
            let _ = writeln!(out, "scalar {name} {ty} {}", fmt_value(*ty, *v));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut m = MemoryImage::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |message: &str| SimError::MemoryFormat {
                line: line_no,
                message: message.to_string(),
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "array" => {
                    if words.len() < 5 {
                        return Err(bad("expected `array NAME TYPE LEN (values|random|fill) ...`"));
                    }
                    let name = words[1];
                    let ty = parse_ty(words[2]).ok_or_else(|| bad("type must be int or float"))?;
                    let len: usize = words[3].parse().map_err(|_| bad("bad array length"))?;
                    let data = match words[4] {
                        "values" => {
                            let vals = words[5..]
                                .iter()
                                .map(|w| parse_value(ty, w).ok_or_else(|| bad("bad element value")))
                                .collect::<Result<Vec<_>, _>>()?;
                            if vals.len() != len {
                                return Err(bad("value count does not match length"));
                            }
                            ArrayData { ty, data: vals }
                        }
                        "random" => {
                            let seed: u64 = words
                                .get(5)
                                .and_then(|w| w.parse().ok())
                                .ok_or_else(|| bad("expected a seed"))?;
                            ArrayData::random(ty, len, seed, name)
                        }
                        "fill" => {
                            let v = words
                                .get(5)
                                .and_then(|w| parse_value(ty, w))
                                .ok_or_else(|| bad("expected a fill value"))?;
                            ArrayData {
                                ty,
                                data: vec![v; len],
                            }
                        }
                        _ => return Err(bad("expected values, random or fill")),
                    };
                    if m.arrays.insert(name.to_string(), data).is_some() {
                        return Err(bad("array defined twice"));
                    }
                }
                "scalar" => {
                    if words.len() != 4 {
                        return Err(bad("expected `scalar NAME TYPE VALUE`"));
                    }
                    let ty = parse_ty(words[2]).ok_or_else(|| bad("type must be int or float"))?;
                    let v = parse_value(ty, words[3]).ok_or_else(|| bad("bad scalar value"))?;
                    m.scalars.insert(words[1].to_string(), (ty, v));
                }
                _ => return Err(bad("expected `array` or `scalar`")),
            }
        }
        Ok(m)
    }
}
