use crate::store::blob;
use crate::tensor::Tensor;

use super::{PipelineError, Result};

/// Data flowing between processors.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    Tensor(Tensor),
    List(Vec<Value>),
}

const T_INT: u8 = 1;
const T_FLOAT: u8 = 2;
const T_STR: u8 = 3;
const T_BOOL: u8 = 4;
const T_TENSOR: u8 = 5;
const T_LIST: u8 = 6;

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Value {
    /// Canonical byte form: a tag byte, then little-endian scalars, length-prefixed UTF-8,
    /// `VZT1` tensors, or a counted list.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Value::Int(v) => {
                out.push(T_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::Float(v) => {
                out.push(T_FLOAT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Value::Str(s) => {
                out.push(T_STR);
                put_str(out, s);
            }
            Value::Bool(b) => {
                out.push(T_BOOL);
                out.push(*b as u8);
            }
            Value::Tensor(t) => {
                out.push(T_TENSOR);
                blob::encode_into(t, out);
            }
            Value::List(items) => {
                out.push(T_LIST);
                out.extend_from_slice(&(items.len() as u64).to_le_bytes());
                for v in items {
                    v.encode_into(out);
                }
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Value> {
        let (v, used) = decode_at(bytes, 0)?;
        if used != bytes.len() {
            return Err(PipelineError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - used
            )));
        }
        Ok(v)
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_float(&self) -> Option<f64> {
        match self {
            Value::Float(v) => Some(*v),
            Value::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.into())
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| PipelineError::Decode(format!("truncated at byte {at}")))
}

fn decode_at(bytes: &[u8], at: usize) -> Result<(Value, usize)> {
    let tag = take(bytes, at, 1)?[0];
    let p = at + 1;
    let u64_at = |o: usize| -> Result<u64> {
        Ok(u64::from_le_bytes(take(bytes, o, 8)?.try_into().unwrap()))
    };
    Ok(match tag {
        T_INT => (Value::Int(u64_at(p)? as i64), p + 8),
        T_FLOAT => (Value::Float(f64::from_bits(u64_at(p)?)), p + 8),
        T_STR => {
            let n = u64_at(p)? as usize;
            let s = take(bytes, p + 8, n)?;
            let s = std::str::from_utf8(s)
                .map_err(|e| PipelineError::Decode(format!("string at byte {p}: {e}")))?;
            (Value::Str(s.into()), p + 8 + n)
        }
        T_BOOL => (Value::Bool(take(bytes, p, 1)?[0] != 0), p + 1),
        T_TENSOR => {
            let (t, used) = blob::decode_prefix(&bytes[p..])
                .map_err(|e| PipelineError::Decode(format!("tensor at byte {p}: {e}")))?;
            (Value::Tensor(t), p + used)
        }
        T_LIST => {
            let n = u64_at(p)? as usize;
            let mut o = p + 8;
            let mut items = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let (v, next) = decode_at(bytes, o)?;
                items.push(v);
                o = next;
            }
            (Value::List(items), o)
        }
        other => return Err(PipelineError::Decode(format!("unknown tag {other} at byte {at}"))),
    })
}
