use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Periodic Hann window `w[n] = 0.5 (1 - cos(2πn / length))`.
pub fn hann_window(length: usize) -> Result<Vec<f64>> {
    if length < 2 {
        return Err(invalid(format!("window length {length} < 2")));
    }
    let n = length as f64;
    Ok((0..length)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos()))
        .collect())
}
