//! Canonical JSON rendering: object keys sorted lexicographically at every
//! depth, independent of the map type serde_json was built with.

use serde::Serialize;
use serde_json::{Map, Value};

pub fn sort_keys(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), sort_keys(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(sort_keys).collect()),
        other => other.clone(),
    }
}

/// Two-space indented canonical form.
pub fn canonical_pretty(value: &Value) -> String {
    serde_json::to_string_pretty(&sort_keys(value)).expect("json value serializes")
}

/// Single-line canonical form.
pub fn canonical_compact(value: &Value) -> String {
    serde_json::to_string(&sort_keys(value)).expect("json value serializes")
}

/// Canonical single-line rendering of any serializable value.
pub fn to_canonical_line<T: Serialize>(value: &T) -> String {
    canonical_compact(&serde_json::to_value(value).expect("value serializes"))
}
