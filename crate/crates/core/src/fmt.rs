//! Number formatting shared by the CSV and SVG writers.

/// Like C's `%.9g`: nine significant digits, trailing zeros trimmed. Nine
/// digits are enough to round-trip any f32.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Fixed decimals, with negative zero printed as zero.
pub fn fixed(v: f64, decimals: usize) -> String {
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_printf_g() {
        assert_eq!(sig9(0.974631846), "0.974631846");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(-0.5), "-0.5");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1.5e-7), "1.5e-07");
        assert_eq!(sig9(0.0001234), "0.0001234");
        assert_eq!(sig9(2.5e10), "2.5e+10");
    }

    #[test]
    fn f32_round_trips() {
        for v in [0.1f32, -0.987_654_3, 1e-6, 3.4e38, 0.33333334] {
            let s = sig9(v as f64);
            assert_eq!(s.parse::<f32>().unwrap(), v, "{s}");
        }
    }

    #[test]
    fn fixed_hides_negative_zero() {
        assert_eq!(fixed(-0.0000001, 3), "0.000");
        assert_eq!(fixed(-1.5, 1), "-1.5");
    }
}
