//! JSON has no representation for infinite floats. WADT values legitimately
//! reach `+inf` (starved peers), so such fields go through these helpers,
//! which write non-finite values as the strings `"inf"`, `"-inf"` or `"nan"`.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use std::fmt;

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

struct F64Visitor;

impl<'de> Visitor<'de> for F64Visitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str("a number or one of \"inf\", \"-inf\", \"nan\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        match v {
            "inf" | "Infinity" => Ok(f64::INFINITY),
            "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
            "nan" | "NaN" => Ok(f64::NAN),
            other => Err(E::custom(format!("unexpected float string {other:?}"))),
        }
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    d.deserialize_any(F64Visitor)
}

/// The same encoding as a free-standing JSON value.
pub fn to_value(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or_else(|| {
            let text = if v.is_nan() {
                "nan"
            } else if v > 0.0 {
                "inf"
            } else {
                "-inf"
            };
            serde_json::Value::String(text.into())
        })
}

/// Same encoding for `Vec<f64>`.
pub mod vec {
    use serde::de::Deserializer;
    use serde::ser::{SerializeSeq, Serializer};
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&Wrapped(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Wrapped> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|w| w.0).collect())
    }
}

/// Same encoding for `Option<f64>`; `None` is `null`.
pub mod option {
    use serde::de::Deserializer;
    use serde::ser::Serializer;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Wrapped(*x).serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrapped>::deserialize(d)?.map(|w| w.0))
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Probe {
        #[serde(with = "super")]
        x: f64,
        #[serde(with = "super::vec")]
        xs: Vec<f64>,
        #[serde(with = "super::option")]
        o: Option<f64>,
    }

    #[test]
    fn infinite_values_survive_json() {
        let p = Probe {
            x: f64::INFINITY,
            xs: vec![1.5, f64::NEG_INFINITY],
            o: Some(f64::INFINITY),
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"x":"inf","xs":[1.5,"-inf"],"o":"inf"}"#);
        assert_eq!(serde_json::from_str::<Probe>(&s).unwrap(), p);
    }

    #[test]
    fn free_values() {
        assert_eq!(super::to_value(1.5), serde_json::json!(1.5));
        assert_eq!(super::to_value(f64::INFINITY), serde_json::json!("inf"));
        assert_eq!(super::to_value(f64::NAN), serde_json::json!("nan"));
    }

    #[test]
    fn plain_numbers_accepted() {
        let p: Probe = serde_json::from_str(r#"{"x":2,"xs":[],"o":null}"#).unwrap();
        assert_eq!(p.x, 2.0);
        assert_eq!(p.o, None);
    }
}
