//! Scalar and slice math on `f64` that works without `std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// `max(v) + ln Σ exp(v - max(v))`.
///
/// Panics on an empty slice. If the maximum is `-inf` the result is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "log_sum_exp of an empty slice");
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = v.iter().map(|&x| exp(x - max)).sum();
    max + ln(s)
}

/// Writes `v_i - log_sum_exp(v)` into `out`.
pub fn log_softmax_into(v: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(v);
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

pub fn log_softmax(v: &[f64]) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; v.len()];
    log_softmax_into(v, &mut out);
    out
}

/// Index of the maximum; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
