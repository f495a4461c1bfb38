//! Model files and flat `key=value` documents.
//!
//! A model file is
//!
//! ```text
//! ATL1\n
//! {"version":1,"layers":[…],"config":…,"payload_bytes":N}\n
//! N bytes of little-endian f64 weights, layer by layer, row-major
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, Layer, Network};

pub const MAGIC: &[u8] = b"ATL1\n";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_BYTES: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    rows: usize,
    cols: usize,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    layers: Vec<LayerHeader>,
    config: Value,
    payload_bytes: usize,
}

/// A network together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub network: Network,
    pub config: Value,
}

pub fn encode_model(net: &Network, config: &Value) -> Result<Vec<u8>> {
    let layers = net
        .layers()
        .iter()
        .map(|l| LayerHeader {
            rows: l.weights.rows(),
            cols: l.weights.cols(),
            activation: l.activation,
        })
        .collect();
    let payload: Vec<u8> = net
        .weights()
        .flat_map(|w| w.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        layers,
        config: config.clone(),
        payload_bytes: payload.len(),
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?);
    out.push(b'\n');
    out.extend(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(Error::Truncated("file ends inside the magic tag".into()))
        } else {
            Err(Error::Format("not a model file".into()))
        };
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Truncated("file ends inside the header".into()))?;
    let raw: Value = serde_json::from_slice(&rest[..nl])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let version = raw.get("version").and_then(Value::as_u64).unwrap_or(0);
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(raw).map_err(|e| Error::Format(format!("header: {e}")))?;
    let start = MAGIC.len() + nl + 1;
    let expected_len = start + header.payload_bytes + CHECKSUM_BYTES;
    if bytes.len() < expected_len {
        return Err(Error::Truncated(format!(
            "expected {expected_len} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected_len {
        return Err(Error::Format("trailing bytes after the checksum".into()));
    }
    let body_end = start + header.payload_bytes;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::Checksum);
    }

    let needed: usize = header.layers.iter().map(|l| l.rows * l.cols * 8).sum();
    if needed != header.payload_bytes {
        return Err(Error::Format("payload size does not match the layer shapes".into()));
    }
    let mut values = bytes[start..body_end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let layers = header
        .layers
        .iter()
        .map(|l| {
            let data = values.by_ref().take(l.rows * l.cols).collect();
            Ok(Layer {
                weights: Matrix::new(l.rows, l.cols, data)?,
                activation: l.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFile {
        network: Network::new(layers)?,
        config: header.config,
    })
}

pub fn save_model(path: &Path, net: &Network, config: &Value) -> Result<()> {
    std::fs::write(path, encode_model(net, config)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Renders any serializable value as one `key=value` line per leaf.
///
/// Nested fields are joined with `.`, array elements use their index, and
/// leaves are JSON literals, so strings stay quoted and floats keep their
/// shortest round-trip form. Empty arrays and objects appear as `[]` / `{}`.
pub fn to_kv<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = String::new();
    flatten("", &v, &mut out);
    Ok(out)
}

fn flatten(prefix: &str, v: &Value, out: &mut String) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                flatten(&key(k), child, out);
            }
        }
        Value::Array(a) if !a.is_empty() => {
            for (i, child) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), child, out);
            }
        }
        leaf => {
            out.push_str(prefix);
            out.push('=');
            out.push_str(&leaf.to_string());
            out.push('\n');
        }
    }
}

/// Inverse of [`to_kv`]. Blank lines and lines starting with `#` are ignored.
pub fn from_kv<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut root = Value::Null;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            path: "<key=value>".into(),
            line: n + 1,
            msg,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad("missing `=`".into()))?;
        let leaf: Value =
            serde_json::from_str(v).map_err(|e| bad(format!("value of `{k}`: {e}")))?;
        let path: Vec<&str> = if k.is_empty() { vec![] } else { k.split('.').collect() };
        insert(&mut root, &path, leaf).map_err(bad)?;
    }
    serde_json::from_value(finish(root)).map_err(|e| Error::Format(e.to_string()))
}

/// Inserts into nested objects; numeric segments are collected as object
/// keys and turned into arrays by [`finish`].
fn insert(node: &mut Value, path: &[&str], leaf: Value) -> std::result::Result<(), String> {
    let Some((head, tail)) = path.split_first() else {
        if !node.is_null() {
            return Err("duplicate key".into());
        }
        *node = leaf;
        return Ok(());
    };
    if node.is_null() {
        *node = Value::Object(Map::new());
    }
    let Value::Object(map) = node else {
        return Err(format!("`{head}` nested under a scalar"));
    };
    insert(map.entry(head.to_string()).or_insert(Value::Null), tail, leaf)
}

fn finish(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let is_array = !m.is_empty()
                && (0..m.len()).all(|i| m.contains_key(&i.to_string()));
            if is_array {
                let mut m = m;
                Value::Array(
                    (0..m.len())
                        .map(|i| finish(m.remove(&i.to_string()).expect("checked")))
                        .collect(),
                )
            } else {
                Value::Object(m.into_iter().map(|(k, v)| (k, finish(v))).collect())
            }
        }
        other => other,
    }
}

pub fn write_kv<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_kv(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_kv<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_kv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use serde_json::json;

    fn net() -> Network {
        "3-5-2:softplus(2)".parse::<Architecture>().unwrap().init(4)
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let n = net();
        let cfg = json!({"epochs": 3, "note": "x"});
        let bytes = encode_model(&n, &cfg).unwrap();
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.network, n);
        assert_eq!(back.config, cfg);
        for i in 0..20 {
            let x = [i as f64 * 0.1, -0.3, 1.0 / (i as f64 + 1.0)];
            assert_eq!(
                n.forward(&x).unwrap().as_ref().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.network.forward(&x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(encode_model(&n, &cfg).unwrap(), bytes);
    }

    #[test]
    fn damaged_files_give_distinct_errors() {
        let bytes = encode_model(&net(), &Value::Null).unwrap();
        for cut in [2, 20, bytes.len() - 1] {
            assert!(
                matches!(decode_model(&bytes[..cut]), Err(Error::Truncated(_))),
                "cut at {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let at = bytes.len() - 40;
        flipped[at] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(Error::Checksum)));

        let tag: &[u8] = b"\"version\":1";
        let pos = bytes.windows(tag.len()).position(|w| w == tag).unwrap();
        let mut v999 = bytes[..pos].to_vec();
        v999.extend_from_slice(b"\"version\":999");
        v999.extend_from_slice(&bytes[pos + tag.len()..]);
        assert!(matches!(decode_model(&v999), Err(Error::Version { found: 999, .. })));
        assert!(matches!(decode_model(b"PK\x03\x04 zip"), Err(Error::Format(_))));
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Sample {
        name: String,
        ratio: f64,
        widths: Vec<usize>,
        empty: Vec<f64>,
        nested: Option<Inner>,
        missing: Option<f64>,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        tag: String,
    }

    #[test]
    fn kv_round_trip() {
        let s = Sample {
            name: "a=b.c".into(),
            ratio: 0.1 + 0.2,
            widths: (0..12).collect(),
            empty: vec![],
            nested: Some(Inner { tag: "12".into() }),
            missing: None,
        };
        let text = to_kv(&s).unwrap();
        assert!(text.contains("ratio=0.30000000000000004\n"));
        assert!(text.contains("widths.11=11\n"));
        assert!(text.contains("empty=[]\n"));
        assert_eq!(from_kv::<Sample>(&text).unwrap(), s);
        assert!(from_kv::<Sample>("ratio\n").is_err());
    }
}
