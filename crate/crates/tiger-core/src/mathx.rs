//! Float math routed through std or libm depending on the build.

#[cfg(feature = "std")]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    x.ln()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Numerically stable logistic function.
#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Round-half-up for non-negative quantities (`as` truncates toward zero).
#[inline]
pub(crate) fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    (x + 0.5) as usize
}

/// Ceiling of a non-negative float as an integer.
#[inline]
pub(crate) fn ceil_pos(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    let t = x as usize;
    if (t as f64) < x {
        t + 1
    } else {
        t
    }
}
