//! Integer-order Bessel functions of the first kind.

/// First positive zero of J0.
pub const J0_FIRST_ZERO: f64 = 2.404_825_557_695_773;

/// J_n(x) by its power series. Accurate to a few ulp for |x| ≲ 10,
/// which covers any practical modulation depth.
pub fn bessel_j(n: i32, x: f64) -> f64 {
    let m = n.unsigned_abs();
    let sign = if n < 0 && m % 2 == 1 { -1.0 } else { 1.0 };
    if x == 0.0 {
        return if m == 0 { 1.0 } else { 0.0 };
    }
    let half = 0.5 * x;
    let mut term = 1.0;
    for k in 1..=m {
        term *= half / k as f64;
    }
    let q = -half * half;
    let mut sum = term;
    let mut k = 1u32;
    loop {
        term *= q / (k as f64 * (k + m) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() || k > 200 {
            break;
        }
        k += 1;
    }
    sign * sum
}
