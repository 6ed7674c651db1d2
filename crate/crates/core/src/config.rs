//! String-keyed scalar maps carried inside protocol messages, used for
//! hyper-parameters and per-request metadata.
//!
//! Wire layout: `count:u32` BE, then entries in ascending key-byte order.
//! Each entry is `key` (u16 BE length + UTF-8 bytes), `tag:u8`, `value`.
//! Tags: 0x00 bool (1 byte), 0x01 int64 BE, 0x02 float64 BE, 0x03 string
//! (key-style length + bytes).

use std::collections::BTreeMap;

use crate::codec::{put_f64, put_i64, put_u16, put_u32, ByteReader, CodecError};

const TAG_BOOL: u8 = 0x00;
const TAG_INT: u8 = 0x01;
const TAG_FLOAT: u8 = 0x02;
const TAG_STRING: u8 = 0x03;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

/// Scalar map with unique keys. Iteration and encoding order is ascending
/// key byte sequence, so the encoding is independent of insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, ConfigValue>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keys and string values must fit the u16 length prefix (64 KiB).
    pub fn insert(&mut self, key: impl Into<String>, value: ConfigValue) {
        let key = key.into();
        assert!(key.len() <= u16::MAX as usize, "config key too long");
        if let ConfigValue::Str(s) = &value {
            assert!(s.len() <= u16::MAX as usize, "config string value too long");
        }
        self.entries.insert(key, value);
    }

    pub fn insert_bool(&mut self, key: impl Into<String>, v: bool) {
        self.insert(key, ConfigValue::Bool(v));
    }

    pub fn insert_int(&mut self, key: impl Into<String>, v: i64) {
        self.insert(key, ConfigValue::Int(v));
    }

    pub fn insert_float(&mut self, key: impl Into<String>, v: f64) {
        self.insert(key, ConfigValue::Float(v));
    }

    pub fn insert_str(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.insert(key, ConfigValue::Str(v.into()));
    }

    pub fn get(&self, key: &str) -> Option<&ConfigValue> {
        self.entries.get(key)
    }

    pub fn get_bool(&self, key: &str) -> Option<bool> {
        match self.entries.get(key) {
            Some(ConfigValue::Bool(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn get_int(&self, key: &str) -> Option<i64> {
        match self.entries.get(key) {
            Some(ConfigValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn get_float(&self, key: &str) -> Option<f64> {
        match self.entries.get(key) {
            Some(ConfigValue::Float(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        match self.entries.get(key) {
            Some(ConfigValue::Str(v)) => Some(v),
            _ => None,
        }
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ConfigValue)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Canonical sorted-key encoding; independent of insertion order.
pub fn encode_config(c: &ConfigMap) -> Vec<u8> {
    let mut out = Vec::new();
    write_config(&mut out, c);
    out
}

pub(crate) fn write_config(out: &mut Vec<u8>, c: &ConfigMap) {
    put_u32(out, c.entries.len() as u32);
    for (key, value) in &c.entries {
        write_str(out, key);
        match value {
            ConfigValue::Bool(v) => {
                out.push(TAG_BOOL);
                out.push(u8::from(*v));
            }
            ConfigValue::Int(v) => {
                out.push(TAG_INT);
                put_i64(out, *v);
            }
            ConfigValue::Float(v) => {
                out.push(TAG_FLOAT);
                put_f64(out, *v);
            }
            ConfigValue::Str(v) => {
                out.push(TAG_STRING);
                write_str(out, v);
            }
        }
    }
}

pub(crate) fn write_str(out: &mut Vec<u8>, s: &str) {
    put_u16(out, s.len() as u16);
    out.extend_from_slice(s.as_bytes());
}

/// Inverse of [`encode_config`]; the whole input must be consumed.
pub fn decode_config(bytes: &[u8]) -> Result<ConfigMap, CodecError> {
    let mut r = ByteReader::new(bytes);
    let c = read_config(&mut r)?;
    r.finish()?;
    Ok(c)
}

pub(crate) fn read_config(r: &mut ByteReader) -> Result<ConfigMap, CodecError> {
    let count = r.u32()? as usize;
    let mut entries = BTreeMap::new();
    let mut prev_key: Option<String> = None;
    for _ in 0..count {
        let key = read_str(r)?;
        if let Some(prev) = &prev_key {
            if *prev == key {
                return Err(CodecError::DuplicateKey(key));
            }
            if prev.as_bytes() > key.as_bytes() {
                return Err(CodecError::MalformedEncoding(format!(
                    "keys out of canonical order: {prev:?} before {key:?}"
                )));
            }
        }
        let tag = r.u8()?;
        let value = match tag {
            TAG_BOOL => match r.u8()? {
                0 => ConfigValue::Bool(false),
                1 => ConfigValue::Bool(true),
                b => {
                    return Err(CodecError::MalformedEncoding(format!(
                        "bool byte 0x{b:02x}"
                    )))
                }
            },
            TAG_INT => ConfigValue::Int(r.i64()?),
            TAG_FLOAT => ConfigValue::Float(r.f64()?),
            TAG_STRING => ConfigValue::Str(read_str(r)?),
            t => return Err(CodecError::UnknownValueTag(t)),
        };
        entries.insert(key.clone(), value);
        prev_key = Some(key);
    }
    Ok(ConfigMap { entries })
}

pub(crate) fn read_str(r: &mut ByteReader) -> Result<String, CodecError> {
    let len = r.u16()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec())
        .map_err(|e| CodecError::MalformedEncoding(format!("invalid UTF-8: {e}")))
}
