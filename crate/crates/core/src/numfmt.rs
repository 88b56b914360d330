//! Number parsing and formatting used by the CSV and JSON surfaces.
//!
//! Inputs accept plain decimals as well as power-of-two notation (`2^-9.5`).
//! CSV emission writes 17 significant digits in positional notation, which
//! round-trips every finite `f64` bit-exactly.

use std::fmt::Write as _;

/// Parses a real number in decimal/scientific or `2^x` notation.
pub fn parse_real(text: &str) -> Option<f64> {
    let s = text.trim();
    if s.is_empty() {
        return None;
    }
    if let Some(exp) = s.strip_prefix("2^") {
        let e: f64 = exp.trim().parse().ok()?;
        let v = e.exp2();
        return v.is_finite().then_some(v);
    }
    let v: f64 = s.parse().ok()?;
    v.is_finite().then_some(v)
}

/// Parses an unsigned integer, also accepting `2^k` for integral results.
pub fn parse_uint(text: &str) -> Option<u64> {
    let s = text.trim();
    if let Some(exp) = s.strip_prefix("2^") {
        let k: u32 = exp.trim().parse().ok()?;
        return 1u64.checked_shl(k);
    }
    s.parse().ok()
}

/// Parses a signed integer; power notation is not accepted here.
pub fn parse_int(text: &str) -> Option<i64> {
    text.trim().parse().ok()
}

/// Formats `x` with 17 significant digits, positional where the decimal
/// exponent lies in `[-7, 21)` and scientific otherwise.
pub fn fmt_sig17(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{:.16e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    if !(-7..21).contains(&exp) {
        return sci;
    }
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    let mut out = String::with_capacity(digits.len() + 10);
    out.push_str(sign);
    if exp >= 0 {
        let int_len = exp as usize + 1;
        if int_len >= digits.len() {
            out.push_str(&digits);
            for _ in digits.len()..int_len {
                out.push('0');
            }
            out.push_str(".0");
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    } else {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(&digits);
    }
    out
}

/// Writes `x` as `2^k` when it is an exact power of two with integral or
/// half-integral exponent, otherwise as a decimal. Used in labels only.
pub fn fmt_pow2_label(x: f64) -> String {
    let l = x.log2();
    let twice = (2.0 * l).round();
    if (twice / 2.0).exp2() == x {
        let mut s = String::new();
        if twice % 2.0 == 0.0 {
            let _ = write!(s, "2^{}", twice as i64 / 2);
        } else {
            let _ = write!(s, "2^{}", twice / 2.0);
        }
        s
    } else {
        format!("{x}")
    }
}

/// Serde adapter mapping non-finite floats to JSON `null` and back to
/// `+inf` (an unidentified uncertainty).
pub mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
