use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SignificanceResult {
    pub z: f64,
    /// Two-sided p-value under the normal approximation.
    pub p: f64,
    pub n_segments: usize,
    pub significant: bool,
    /// Zero-variance differences with a nonzero mean.
    pub degenerate: bool,
}

/// Matched-pair segment test on per-segment error counts.
pub fn mapsswe(errs_a: &[usize], errs_b: &[usize]) -> Result<SignificanceResult> {
    if errs_a.len() != errs_b.len() {
        return Err(Error::Domain(format!("segment counts differ: {} vs {}", errs_a.len(), errs_b.len())));
    }
    let n = errs_a.len();
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 segments, got {n}")));
    }
    let d: Vec<f64> = errs_a.iter().zip(errs_b).map(|(&a, &b)| a as f64 - b as f64).collect();
    Ok(from_differences(&d))
}

/// Same test starting from the differences directly (`n >= 2` assumed).
pub fn from_differences(d: &[f64]) -> SignificanceResult {
    let n = d.len();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    let (z, p, degenerate) = if d.iter().all(|&x| x == 0.0) {
        (0.0, 1.0, false)
    } else if sd == 0.0 {
        (mean.signum() * f64::INFINITY, 0.0, true)
    } else {
        let z = mean / (sd / nf.sqrt());
        (z, libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0), false)
    };
    SignificanceResult { z, p, n_segments: n, significant: p < ALPHA, degenerate }
}
