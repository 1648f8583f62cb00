use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::value::put_str;
use super::{ParamValue, PipelineError, Result, Value};

const MAGIC: &[u8; 4] = b"VZC1";

/// SHA-256 over name ‖ version ‖ params (sorted by name) ‖ canonical input, lowercase hex.
pub fn compute_cache_key(
    name: &str,
    version: &str,
    params: &BTreeMap<String, ParamValue>,
    input: &Value,
) -> String {
    let mut buf = Vec::new();
    put_str(&mut buf, name);
    put_str(&mut buf, version);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (k, v) in params {
        put_str(&mut buf, k);
        v.encode_into(&mut buf);
    }
    input.encode_into(&mut buf);
    let digest = Sha256::digest(&buf);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content-addressed result store: `<root>/<first2hex>/<key>.bin`.
#[derive(Clone, Debug)]
pub struct CacheStore {
    root: PathBuf,
}

impl CacheStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CacheStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2.min(key.len())]).join(format!("{key}.bin"))
    }

    /// `None` when absent; `CacheCorrupt` when the checksum or payload does not verify.
    pub fn get(&self, key: &str) -> Result<Option<Value>> {
        let path = self.path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(PipelineError::Io(format!("{}: {e}", path.display()))),
        };
        let corrupt = |detail: &str| PipelineError::CacheCorrupt {
            key: key.into(),
            detail: detail.into(),
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let crc = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let payload = &bytes[8..];
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        Value::decode(payload)
            .map(Some)
            .map_err(|e| corrupt(&e.to_string()))
    }

    pub fn put(&self, key: &str, value: &Value) -> Result<()> {
        let path = self.path(key);
        let dir = path.parent().expect("cache path has a parent");
        let io = |e: std::io::Error| PipelineError::Io(format!("{}: {e}", path.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        let payload = value.encode();
        let mut bytes = Vec::with_capacity(payload.len() + 8);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        bytes.extend_from_slice(&payload);
        // Write then rename so readers never see a partial entry.
        let tmp = dir.join(format!(
            "{key}.{}.{:?}.tmp",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::write(&tmp, &bytes).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)
    }
}
