//! Serde helpers that store `f64` values as hex-encoded IEEE-754 bit patterns.
//!
//! Decimal text round-trips are easy to get subtly wrong; bit patterns are not.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn encode(value: f64) -> String {
    format!("{:016x}", value.to_bits())
}

pub fn decode(text: &str) -> Option<f64> {
    if text.len() != 16 {
        return None;
    }
    u64::from_str_radix(text, 16).ok().map(f64::from_bits)
}

pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
    encode(*value).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let text = String::deserialize(d)?;
    decode(&text).ok_or_else(|| D::Error::custom(format!("invalid hex float `{text}`")))
}

/// Same encoding for `BTreeMap<String, f64>`.
pub mod map {
    use super::*;

    pub fn serialize<S: Serializer>(value: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let encoded: BTreeMap<&str, String> = value.iter().map(|(k, v)| (k.as_str(), encode(*v))).collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let raw = BTreeMap::<String, String>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| match decode(&v) {
                Some(x) => Ok((k, x)),
                None => Err(D::Error::custom(format!("invalid hex float `{v}` for `{k}`"))),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_encodings() {
        assert_eq!(encode(1.0), "3ff0000000000000");
        assert_eq!(encode(-0.0), "8000000000000000");
        assert_eq!(decode("3fb999999999999a"), Some(0.1));
        assert_eq!(decode("xyz"), None);
        assert_eq!(decode("3ff00000000000000"), None);
    }

    proptest::proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::num::u64::ANY) {
            let v = f64::from_bits(bits);
            let back = decode(&encode(v)).unwrap();
            proptest::prop_assert_eq!(back.to_bits(), bits);
        }
    }
}
