//! Exponential integrals used by the two-dimensional Ewald split.

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Entire exponential integral `Ein(z) = ∫₀^z (1 − e^{−t})/t dt`.
pub fn ein(z: f64) -> f64 {
    if z < 5.0 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 1..200 {
            term *= -z / k as f64;
            let contrib = -term / k as f64;
            sum += contrib;
            if contrib.abs() < 1e-17 * sum.abs().max(1e-300) {
                break;
            }
        }
        sum
    } else {
        e1(z) + z.ln() + EULER_GAMMA
    }
}

/// Exponential integral `E₁(z) = ∫_z^∞ e^{−t}/t dt` for `z > 0`.
pub fn e1(z: f64) -> f64 {
    debug_assert!(z > 0.0);
    if z <= 1.0 {
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 1..100 {
            term *= -z / k as f64;
            sum += term / k as f64;
            if (term / k as f64).abs() < 1e-17 {
                break;
            }
        }
        -EULER_GAMMA - z.ln() - sum
    } else {
        // modified Lentz on the continued fraction
        let tiny = 1e-300;
        let mut b = z + 1.0;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -((i * i) as f64);
            b += 2.0;
            d = 1.0 / (an * d + b);
            c = b + an / c;
            let del = c * d;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        h * (-z).exp()
    }
}

/// `(1 − e^{−z})/z`, continuous at zero.
pub fn one_minus_exp_over(z: f64) -> f64 {
    if z < 1e-8 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        // E1(1) and E1(2) from standard tables
        assert!((e1(1.0) - 0.219_383_934_395_520_3).abs() < 1e-15);
        assert!((e1(2.0) - 0.048_900_510_708_061_12).abs() < 1e-15);
        assert!((e1(0.5) - 0.559_773_594_776_160_8).abs() < 1e-15);
    }

    #[test]
    fn ein_branches_agree() {
        for &z in &[4.9, 5.0, 5.1] {
            let series = {
                let mut term = 1.0;
                let mut sum = 0.0;
                for k in 1..200 {
                    term *= -z / k as f64;
                    sum -= term / k as f64;
                }
                sum
            };
            let via_e1 = e1(z) + z.ln() + EULER_GAMMA;
            assert!((series - via_e1).abs() < 1e-13, "z = {z}");
            assert!((ein(z) - via_e1).abs() < 1e-13);
        }
    }
}
