//! Deterministic JSON and CSV emission.
//!
//! Objects keep insertion order and every float is printed with 17
//! significant digits in exponent form, so identical inputs give
//! byte-identical reports.

use std::fmt::Write as _;

/// Format a float with 17 significant digits. Non-finite values become `null`
/// in JSON and an empty cell in CSV, so callers get the raw token here.
pub fn format_float(x: f64) -> Option<String> {
    if x.is_finite() {
        // normalize negative zero so sign noise doesn't leak into diffs
        let x = if x == 0.0 { 0.0 } else { x };
        Some(format!("{x:.16e}"))
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<Json>),
    Obj(Vec<(String, Json)>),
}

impl Json {
    pub fn obj<K: Into<String>>(fields: impl IntoIterator<Item = (K, Json)>) -> Json {
        Json::Obj(fields.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn floats(values: &[f64]) -> Json {
        Json::Arr(values.iter().map(|v| Json::Num(*v)).collect())
    }

    /// Pretty-printed with two-space indentation and a trailing newline.
    pub fn to_pretty(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, depth: usize) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Int(i) => {
                let _ = write!(out, "{i}");
            }
            Json::Num(x) => match format_float(*x) {
                Some(s) => out.push_str(&s),
                None => out.push_str("null"),
            },
            Json::Str(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
            Json::Arr(items) if items.iter().all(Json::is_scalar) => {
                // scalar arrays stay on one line
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    item.write(out, depth);
                }
                out.push(']');
            }
            Json::Arr(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    out.push_str(if i > 0 { ",\n" } else { "\n" });
                    indent(out, depth + 1);
                    item.write(out, depth + 1);
                }
                out.push('\n');
                indent(out, depth);
                out.push(']');
            }
            Json::Obj(fields) if fields.is_empty() => out.push_str("{}"),
            Json::Obj(fields) => {
                out.push('{');
                for (i, (k, v)) in fields.iter().enumerate() {
                    out.push_str(if i > 0 { ",\n" } else { "\n" });
                    indent(out, depth + 1);
                    out.push_str(&serde_json::to_string(k).expect("string serializes"));
                    out.push_str(": ");
                    v.write(out, depth + 1);
                }
                out.push('\n');
                indent(out, depth);
                out.push('}');
            }
        }
    }

    fn is_scalar(&self) -> bool {
        !matches!(self, Json::Arr(_) | Json::Obj(_))
    }
}

fn indent(out: &mut String, depth: usize) {
    for _ in 0..depth {
        out.push_str("  ");
    }
}

impl From<f64> for Json {
    fn from(x: f64) -> Self {
        Json::Num(x)
    }
}

impl From<usize> for Json {
    fn from(x: usize) -> Self {
        Json::Int(x as i64)
    }
}

impl From<&str> for Json {
    fn from(s: &str) -> Self {
        Json::Str(s.to_owned())
    }
}

impl From<String> for Json {
    fn from(s: String) -> Self {
        Json::Str(s)
    }
}

impl<T: Into<Json>> From<Option<T>> for Json {
    fn from(v: Option<T>) -> Self {
        v.map(Into::into).unwrap_or(Json::Null)
    }
}

/// A CSV cell for a float: 17 significant digits, empty when non-finite.
pub fn csv_float(x: f64) -> String {
    format_float(x).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, -2.5e-300, 1.0 / 3.0, 123456789.125, f64::MIN_POSITIVE] {
            let s = format_float(x).unwrap();
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_float(-0.0).unwrap(), "0.0000000000000000e0");
        assert_eq!(format_float(f64::NAN), None);
    }

    #[test]
    fn pretty_layout() {
        let j = Json::obj([
            ("name", Json::from("a\"b")),
            ("values", Json::floats(&[1.0, 0.5])),
            ("empty", Json::Arr(vec![])),
            ("nested", Json::Arr(vec![Json::obj([("k", Json::Int(3))])])),
            ("missing", Json::from(None::<f64>)),
        ]);
        let text = j.to_pretty();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["name"], "a\"b");
        assert_eq!(parsed["values"][1], 0.5);
        assert_eq!(parsed["nested"][0]["k"], 3);
        assert!(parsed["missing"].is_null());
        let keys: Vec<&str> = parsed.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        // serde_json's default map sorts keys, so check order on the raw text
        assert_eq!(keys.len(), 5);
        assert!(text.find("\"name\"").unwrap() < text.find("\"values\"").unwrap());
    }
}
