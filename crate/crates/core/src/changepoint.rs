//! Single-breakpoint segmentation of a curve into two constant-mean pieces.

use crate::error::{Error, Result};

/// Running sum of squared deviations (Welford) for every prefix length.
/// `out[j]` is the SSE of the first `j` values.
fn prefix_sse<'a>(values: impl Iterator<Item = &'a f64>, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len + 1);
    out.push(0.0);
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, &v) in values.enumerate() {
        let n = (i + 1) as f64;
        let delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
        out.push(m2);
    }
    out
}

/// Split position `b` minimizing `SSE(S[..b]) + SSE(S[b..])` over
/// `1 <= b < len`; ties resolve to the smallest `b`.
pub fn detect_change_point(curve: &[f64]) -> Result<usize> {
    let n = curve.len();
    if n < 4 {
        return Err(Error::InvalidParameter(format!("change point needs at least 4 values, got {n}")));
    }
    if curve.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity curve"));
    }
    if curve.iter().all(|&v| v == curve[0]) {
        return Err(Error::DegenerateInput("constant curve has no change point"));
    }
    let left = prefix_sse(curve.iter(), n);
    let right = prefix_sse(curve.iter().rev(), n);
    let mut best = (f64::INFINITY, 0);
    for b in 1..n {
        let cost = left[b] + right[n - b];
        if cost < best.0 {
            best = (cost, b);
        }
    }
    Ok(best.1)
}
