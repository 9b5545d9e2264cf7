//! Exact JSON checkpoints for [`MlpParams`].
//!
//! ```json
//! {"format":"steerkit-ckpt-v1","meta":{...},"layers":[{"w":[[...]],"b":[...]}]}
//! ```
//!
//! Every float is written as a C99-style hexadecimal float string
//! (`"-0x1.8p+1"`), so a save/load cycle reproduces parameters bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Layer, MlpParams, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "steerkit-ckpt-v1";

/// Formats `x` as a hexadecimal float literal.
pub fn format_hex_float(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    let sign = if x.is_sign_negative() { "-" } else { "" };
    if x.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    let frac = format!("{mant:013x}");
    let frac = frac.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{frac}p{e:+}")
    }
}

/// `m * 2^e` without intermediate overflow or premature underflow.
fn ldexp(mut m: f64, mut e: i32) -> f64 {
    let pow2 = |k: i32| f64::from_bits(((k + 1023) as u64) << 52);
    while e > 1023 {
        m *= pow2(1023);
        e -= 1023;
    }
    while e < -1022 && m != 0.0 {
        m *= pow2(-1022);
        e += 1022;
    }
    m * pow2(e.max(-1022))
}

/// Parses a hexadecimal float literal such as `0x1.8p+1` or `-0x0p+0`.
pub fn parse_hex_float(s: &str) -> Result<f64> {
    let bad = || Error::Checkpoint(format!("malformed hex float {s:?}"));
    let (neg, body) = match s.as_bytes().first() {
        Some(b'-') => (true, &s[1..]),
        Some(b'+') => (false, &s[1..]),
        _ => (false, s),
    };
    let value = match body {
        "inf" => f64::INFINITY,
        "nan" => f64::NAN,
        _ => {
            let body = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")).ok_or_else(bad)?;
            let (digits, exp) = body.split_once(['p', 'P']).ok_or_else(bad)?;
            let exp: i32 = exp.parse().map_err(|_| bad())?;
            let (int_part, frac_part) = digits.split_once('.').unwrap_or((digits, ""));
            if int_part.is_empty() || int_part.len() + frac_part.len() > 15 {
                return Err(bad());
            }
            let mut mant: u64 = 0;
            for c in int_part.chars().chain(frac_part.chars()) {
                mant = (mant << 4) | c.to_digit(16).ok_or_else(bad)? as u64;
            }
            ldexp(mant as f64, exp - 4 * frac_part.len() as i32)
        }
    };
    Ok(if neg { -value } else { value })
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<String>>,
    b: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    meta: Map<String, Value>,
    layers: Vec<LayerDoc>,
}

/// A set of layers plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Map<String, Value>,
    pub layers: Vec<Layer>,
}

impl Checkpoint {
    pub fn new(meta: Map<String, Value>, layers: Vec<Layer>) -> Self {
        Self { meta, layers }
    }

    pub fn from_params(meta: Map<String, Value>, params: &MlpParams) -> Self {
        Self::new(meta, params.layers.clone())
    }

    pub fn to_json(&self) -> String {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (rows, cols) = l.w.as_matrix_dims();
                LayerDoc {
                    w: (0..rows)
                        .map(|r| l.w.data()[r * cols..(r + 1) * cols].iter().map(|&x| format_hex_float(x)).collect())
                        .collect(),
                    b: l.b.data().iter().map(|&x| format_hex_float(x)).collect(),
                }
            })
            .collect();
        let doc = CheckpointDoc {
            format: CHECKPOINT_FORMAT.into(),
            meta: self.meta.clone(),
            layers,
        };
        serde_json::to_string(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| Error::json("checkpoint", e))?;
        if doc.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", doc.format)));
        }
        let layers = doc
            .layers
            .into_iter()
            .map(|l| {
                let rows = l.w.len();
                let cols = l.w.first().map_or(0, Vec::len);
                let mut w = Vec::with_capacity(rows * cols);
                for row in &l.w {
                    if row.len() != cols {
                        return Err(Error::Checkpoint("ragged weight matrix".into()));
                    }
                    for s in row {
                        w.push(parse_hex_float(s)?);
                    }
                }
                let b = l.b.iter().map(|s| parse_hex_float(s)).collect::<Result<Vec<_>>>()?;
                Ok(Layer {
                    w: Tensor::new(vec![rows, cols], w)?,
                    b: Tensor::vector(b),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { meta: doc.meta, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Splits the flat layer list into consecutive networks of the given depths.
    pub fn split(&self, depths: &[usize]) -> Result<Vec<MlpParams>> {
        if depths.iter().sum::<usize>() != self.layers.len() {
            return Err(Error::Checkpoint(format!("expected {} layers, found {}", depths.iter().sum::<usize>(), self.layers.len())));
        }
        let mut out = Vec::with_capacity(depths.len());
        let mut start = 0;
        for &d in depths {
            out.push(MlpParams::from_layers(self.layers[start..start + d].to_vec())?);
            start += d;
        }
        Ok(out)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }
}
