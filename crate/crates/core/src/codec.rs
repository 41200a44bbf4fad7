//! Fixed-width, bit-exact encoding of `f64` values as 16 hex digits of the
//! IEEE-754 bit pattern. Used for the persisted engine state so that
//! save/load/save is byte-identical and the file size does not drift with
//! the printed length of decimals.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serializer};

pub fn encode(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

pub fn decode(s: &str) -> Result<f64, String> {
    if s.len() != 16 {
        return Err(format!("expected 16 hex digits, got '{s}'"));
    }
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|e| format!("bad hex float '{s}': {e}"))
}

pub fn serialize<S: Serializer>(v: &f64, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(&encode(*v))
}

pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
    let s = String::deserialize(de)?;
    decode(&s).map_err(D::Error::custom)
}

pub mod vec {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(v: &[f64], ser: S) -> Result<S::Ok, S::Error> {
        let mut seq = ser.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&encode(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<f64>, D::Error> {
        let raw = Vec::<String>::deserialize(de)?;
        raw.iter().map(|s| decode(s).map_err(D::Error::custom)).collect()
    }
}

pub mod opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<f64>, ser: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => ser.serialize_some(&encode(*x)),
            None => ser.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Option<f64>, D::Error> {
        Option::<String>::deserialize(de)?
            .map(|s| decode(&s).map_err(D::Error::custom))
            .transpose()
    }
}

/// Counters, same fixed width so the file size does not depend on how many
/// digits an iteration or event count happens to have.
pub mod count {
    use super::*;

    pub fn serialize<S: Serializer>(v: &usize, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&format!("{:016x}", *v as u64))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<usize, D::Error> {
        let s = String::deserialize(de)?;
        if s.len() != 16 {
            return Err(D::Error::custom(format!("expected 16 hex digits, got '{s}'")));
        }
        u64::from_str_radix(&s, 16)
            .map_err(D::Error::custom)
            .and_then(|v| usize::try_from(v).map_err(D::Error::custom))
    }
}
