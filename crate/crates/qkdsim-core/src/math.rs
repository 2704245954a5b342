//! Thin wrappers over `libm` for the float operations the models need.
//!
//! Routing everything through one module keeps the core `no_std` and makes
//! results independent of the host's C math library.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn log2(x: f64) -> f64 {
    libm::log2(x)
}

#[inline]
pub fn powf(base: f64, exp: f64) -> f64 {
    libm::pow(base, exp)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    libm::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

/// Binary entropy term `x·log2(x)` with the convention `0·log2(0) = 0`.
#[inline]
pub fn xlog2x(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * log2(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xlog2x_zero_convention() {
        assert_eq!(xlog2x(0.0), 0.0);
        assert_eq!(xlog2x(-1.0), 0.0);
        assert!((xlog2x(0.5) - (-0.5)).abs() < 1e-15);
        assert!((xlog2x(1.0)).abs() < 1e-15);
    }

    #[test]
    fn wrappers_match_std() {
        for &x in &[0.1, 0.5, 1.0, 2.0, 10.0] {
            assert!((exp(x) - f64::exp(x)).abs() <= 1e-12 * f64::exp(x));
            assert!((ln(x) - f64::ln(x)).abs() <= 1e-12);
            assert!((sqrt(x) - f64::sqrt(x)).abs() <= 1e-12);
        }
    }
}
