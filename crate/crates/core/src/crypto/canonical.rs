//! Canonical JSON: object keys sorted by byte order, no insignificant
//! whitespace, UTF-8. Byte fields are expected to already serialize as
//! lowercase hex (see [`crate::crypto::bytes`]).
//!
//! Every signed payload and every digest in the system goes through
//! [`to_canonical_bytes`], so two implementations that agree on the value
//! model agree on the bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::CryptoError;

pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("domain values always serialize to JSON");
    let mut out = Vec::with_capacity(256);
    write_value(&v, &mut out);
    out
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_canonical_bytes(value)).expect("canonical JSON is UTF-8")
}

pub fn from_canonical_bytes<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CryptoError> {
    serde_json::from_slice(bytes).map_err(|e| CryptoError::Encoding(e.to_string()))
}

fn write_value(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => out.extend_from_slice(n.to_string().as_bytes()),
        Value::String(s) => write_str(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_value(item, out);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, val)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_str(k, out);
                out.push(b':');
                write_value(val, out);
            }
            out.push(b'}');
        }
    }
}

fn write_str(s: &str, out: &mut Vec<u8>) {
    let quoted = serde_json::to_string(s).expect("string serialization is infallible");
    out.extend_from_slice(quoted.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_are_sorted_and_compact() {
        let mut m = HashMap::new();
        m.insert("zeta", 1);
        m.insert("alpha", 2);
        m.insert("Mid", 3);
        assert_eq!(to_canonical_string(&m), r#"{"Mid":3,"alpha":2,"zeta":1}"#);
    }

    #[test]
    fn nested_structures() {
        let v = serde_json::json!({"b": [1, {"y": true, "x": null}], "a": "q\"uote"});
        assert_eq!(
            to_canonical_string(&v),
            r#"{"a":"q\"uote","b":[1,{"x":null,"y":true}]}"#
        );
    }

    #[test]
    fn round_trips_through_parser() {
        let v = serde_json::json!({"k": [1, 2, 3], "s": "ü"});
        let bytes = to_canonical_bytes(&v);
        let back: Value = from_canonical_bytes(&bytes).unwrap();
        assert_eq!(back, v);
        assert_eq!(to_canonical_bytes(&back), bytes);
    }
}
