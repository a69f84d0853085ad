//! Number formatting shared by the CSV and JSON exporters.

/// Rounds `x` to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let s = format!("{:.*e}", digits.saturating_sub(1), x);
    s.parse().unwrap_or(x)
}

/// Formats `x` rounded to `digits` significant digits using the shortest
/// representation that round-trips the rounded value.
pub fn sig(x: f64, digits: usize) -> String {
    format!("{}", round_sig(x, digits))
}

/// Twelve significant digits, the precision of every exported weight.
pub fn sig12(x: f64) -> String {
    sig(x, 12)
}
