//! Finite-difference helpers for checking hand-written gradients.

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is near zero from dominating through f32 round-off.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Outcome of comparing analytic and numeric gradients coordinate by
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_relative_error: f64,
    /// Fraction of coordinates within `tolerance`.
    pub fraction_within: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn from_pairs(pairs: &[(f64, f64)], floor: f64, tolerance: f64) -> Self {
        let errs: Vec<f64> = pairs
            .iter()
            .map(|&(a, n)| relative_error(a, n, floor))
            .collect();
        let within = errs.iter().filter(|&&e| e <= tolerance).count();
        GradCheckReport {
            coordinates: pairs.len(),
            max_relative_error: errs.iter().copied().fold(0.0, f64::max),
            fraction_within: if pairs.is_empty() {
                1.0
            } else {
                within as f64 / pairs.len() as f64
            },
            tolerance,
        }
    }
}

/// Central difference of `f` at coordinate `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(f32) -> f64, x: f32, h: f32) -> f64 {
    let plus = f(x + h);
    let minus = f(x - h);
    // Actual step after f32 rounding of x ± h.
    let span = ((x + h) as f64) - ((x - h) as f64);
    (plus - minus) / span
}
