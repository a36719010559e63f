//! Stable numeric formatting for CSV and log output: six significant digits,
//! `.` decimal separator, no locale dependence.

/// Formats with six significant digits. Zero prints as `0`.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let prec = 5 - mag;
    if prec >= 0 {
        format!("{:.*}", prec as usize, x)
    } else {
        let scale = 10f64.powi(-prec);
        format!("{:.0}", (x / scale).round() * scale)
    }
}
