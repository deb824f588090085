//! JSON serialization helpers for the on-disk artifacts.
//!
//! Artifacts that other languages must be able to reproduce bit-for-bit
//! (the codebook, dataset records) are written with floats at 17 significant
//! digits, enough to round-trip any f64 exactly.

use crate::error::Result;
use serde::Serialize;
use std::io;

struct PreciseFloats;

impl serde_json::ser::Formatter for PreciseFloats {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serialize with full-precision decimal floats (17 significant digits).
pub fn to_json_precise<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PreciseFloats);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("json is utf8"))
}

/// Write a file atomically: serialize to a sibling temp file, then rename.
/// A failed command never leaves a partial artifact behind.
pub fn write_atomic(path: &std::path::Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp_write");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_roundtrip_exactly() {
        let xs = vec![
            std::f64::consts::PI,
            1.0 / 3.0,
            5.0,
            -2.2250738585072014e-308,
            6.02e23,
        ];
        let text = to_json_precise(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(xs, back);
    }

    #[test]
    fn precise_floats_have_enough_digits() {
        let text = to_json_precise(&vec![0.1f64]).unwrap();
        // 17 significant digits: 1 before the mark, 16 after.
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
    }
}
