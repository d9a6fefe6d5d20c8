//! Checkpoint persistence.
//!
//! One JSON document per checkpoint:
//! `{"format_version": 1, "metadata": {...}, "params": {name: {"shape": [...], "values": [...]}}}`
//! Floats are written in scientific notation with 17 significant digits so a
//! saved model reloads bit-for-bit.

use super::Tensor;
use crate::error::{CoreError, Result};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u64,
    pub metadata: Value,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| CoreError::Checkpoint(format!("missing parameter '{}'", name)))
    }
}

fn write_f64(out: &mut String, v: f64) {
    // 17 significant digits: enough for any f64 to parse back bit-exactly.
    let _ = write!(out, "{:.16e}", v);
}

fn write_value(out: &mut String, v: &Value) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => {
            let _ = write!(out, "{}", b);
        }
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                let _ = write!(out, "{}", i);
            } else if let Some(u) = n.as_u64() {
                let _ = write!(out, "{}", u);
            } else {
                write_f64(out, n.as_f64().unwrap_or(f64::NAN));
            }
        }
        Value::String(s) => {
            let _ = write!(out, "{}", Value::String(s.clone()));
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(out, item);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, val)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}:", Value::String(k.clone()));
                write_value(out, val);
            }
            out.push('}');
        }
    }
}

/// Serialize named tensors plus a metadata block to `path`.
pub fn save_checkpoint(
    path: &Path,
    entries: &[(String, &Tensor)],
    metadata: &Value,
) -> Result<()> {
    let sorted: BTreeMap<&str, &Tensor> =
        entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    if sorted.len() != entries.len() {
        return Err(CoreError::Checkpoint("duplicate parameter name".into()));
    }
    let mut out = String::new();
    out.push_str("{\"format_version\":");
    let _ = write!(out, "{}", FORMAT_VERSION);
    out.push_str(",\"metadata\":");
    write_value(&mut out, metadata);
    out.push_str(",\"params\":{");
    for (i, (name, t)) in sorted.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{}:{{\"shape\":[", Value::String((*name).to_string()));
        for (j, d) in t.shape.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", d);
        }
        out.push_str("],\"values\":[");
        for (j, v) in t.values.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write_f64(&mut out, *v);
        }
        out.push_str("]}");
    }
    out.push_str("}}\n");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    let doc: Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::Checkpoint(format!("{}: {}", path.display(), e)))?;
    let version = doc
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| CoreError::Checkpoint("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported format_version {}",
            version
        )));
    }
    let metadata = doc.get("metadata").cloned().unwrap_or(Value::Null);
    let params_obj = doc
        .get("params")
        .and_then(Value::as_object)
        .ok_or_else(|| CoreError::Checkpoint("missing params object".into()))?;
    let mut params = BTreeMap::new();
    for (name, entry) in params_obj {
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| CoreError::Checkpoint(format!("param '{}' missing shape", name)))?
            .iter()
            .map(|v| v.as_u64().map(|u| u as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| CoreError::Checkpoint(format!("param '{}' bad shape", name)))?;
        let values: Vec<f64> = entry
            .get("values")
            .and_then(Value::as_array)
            .ok_or_else(|| CoreError::Checkpoint(format!("param '{}' missing values", name)))?
            .iter()
            .map(|v| v.as_f64())
            .collect::<Option<_>>()
            .ok_or_else(|| CoreError::Checkpoint(format!("param '{}' bad values", name)))?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(CoreError::Checkpoint(format!(
                "param '{}' shape/value mismatch",
                name
            )));
        }
        params.insert(name.clone(), Tensor::new(shape, values));
    }
    Ok(Checkpoint {
        format_version: version,
        metadata,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn round_trip_is_bit_faithful() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..64)
            .map(|_| (rng.gen::<f64>() - 0.5) * 10f64.powi(rng.gen_range(-12..12)))
            .collect();
        let t = Tensor::new(vec![8, 8], vals);
        let small = Tensor::new(vec![3], vec![1.0, -0.0, 2.5e-308]);
        let dir = std::env::temp_dir().join(format!("ckpt_test_{}", std::process::id()));
        let path = dir.join("model.json");
        let meta = serde_json::json!({"d_x": 5, "stats": [0.123456789012345678, -3.0]});
        save_checkpoint(
            &path,
            &[("w".to_string(), &t), ("b".to_string(), &small)],
            &meta,
        )
        .unwrap();
        let ck = load_checkpoint(&path).unwrap();
        let w = ck.tensor("w").unwrap();
        assert_eq!(w.shape, vec![8, 8]);
        for (a, b) in w.values.iter().zip(t.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let b = ck.tensor("b").unwrap();
        for (a, e) in b.values.iter().zip(small.values.iter()) {
            assert_eq!(a.to_bits(), e.to_bits());
        }
        assert_eq!(ck.metadata["d_x"], serde_json::json!(5));
        assert_eq!(
            ck.metadata["stats"][0].as_f64().unwrap().to_bits(),
            0.123456789012345678f64.to_bits()
        );
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn missing_param_is_reported() {
        let dir = std::env::temp_dir().join(format!("ckpt_test2_{}", std::process::id()));
        let path = dir.join("m.json");
        let t = Tensor::new(vec![1], vec![1.0]);
        save_checkpoint(&path, &[("a".into(), &t)], &serde_json::Value::Null).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert!(ck.tensor("zzz").is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
