//! Deterministic six-significant-digit output.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// `v` rounded to six significant digits; exponent form outside [1e-4, 1e6).
pub fn format_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let r = round_sig(v);
    let a = r.abs();
    if a != 0.0 && !(1e-4..1e6).contains(&a) {
        let s = format!("{r:.5e}");
        let (mant, exp) = s.split_once('e').unwrap_or((&s, "0"));
        let mant = if mant.contains('.') { mant.trim_end_matches('0').trim_end_matches('.') } else { mant };
        return format!("{mant}e{exp}");
    }
    format!("{r}")
}

pub fn round_sig(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.5e}").parse().unwrap_or(v)
}

/// Rounds every float in a JSON tree. Non-finite floats become null.
pub fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap();
            serde_json::Number::from_f64(round_sig(x)).map_or(Value::Null, Value::Number)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_value).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
        other => other,
    }
}

/// Pretty JSON with rounded floats and a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let v = round_value(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_digits() {
        assert_eq!(format_sig(0.123456789), "0.123457");
        assert_eq!(format_sig(1e-10), "1e-10");
        assert_eq!(format_sig(-2.5e-7), "-2.5e-7");
        assert_eq!(format_sig(1234567.0), "1.23457e6");
        assert_eq!(format_sig(1.0), "1");
    }

    #[test]
    fn json_rounding() {
        let v = serde_json::json!({"a": [1.23456789, 2], "b": {"c": 0.1 + 0.2}});
        assert_eq!(round_value(v).to_string(), r#"{"a":[1.23457,2],"b":{"c":0.3}}"#);
    }
}
