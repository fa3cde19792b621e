//! Trigonometric interpolation of nodal values on equispaced periodic grids.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn spectrum(values: &[f64]) -> Vec<Complex<f64>> {
    let n = values.len();
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

/// Values of the trigonometric interpolant on `factor` times as many nodes.
pub fn upsample(values: &[f64], factor: usize) -> Vec<f64> {
    let n = values.len();
    if factor <= 1 {
        return values.to_vec();
    }
    let m = n * factor;
    let c = spectrum(values);
    let mut fine = vec![Complex::new(0.0, 0.0); m];
    let half = n / 2;
    for k in 0..half {
        fine[k] = c[k];
        if k > 0 {
            fine[m - k] = c[n - k];
        }
    }
    // split the Nyquist mode evenly so the interpolant stays real
    fine[half] = 0.5 * c[half];
    fine[m - half] = 0.5 * c[half];
    FftPlanner::new().plan_fft_inverse(m).process(&mut fine);
    fine.iter().map(|c| c.re).collect()
}

/// Derivative with respect to the parameter `t ∈ [0, 2π)`.
pub fn derivative(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut c = spectrum(values);
    let half = n / 2;
    for (k, ck) in c.iter_mut().enumerate() {
        let wave = if k < half {
            k as f64
        } else if k == half {
            0.0
        } else {
            k as f64 - n as f64
        };
        *ck *= Complex::new(0.0, wave);
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut c);
    c.iter().map(|v| v.re).collect()
}

/// Interpolant evaluated at an arbitrary parameter.
pub fn eval_at(values: &[f64], t: f64) -> f64 {
    let n = values.len();
    let c = spectrum(values);
    let half = n / 2;
    let mut s = c[0].re + c[half].re * (half as f64 * t).cos();
    for k in 1..half {
        let e = Complex::from_polar(1.0, k as f64 * t);
        s += 2.0 * (c[k] * e).re;
    }
    s
}

/// Interpolant at the parameter midpoints `t_i + π/n`.
pub fn midpoints(values: &[f64]) -> Vec<f64> {
    let fine = upsample(values, 2);
    fine.iter().skip(1).step_by(2).cloned().collect()
}

/// Equispaced parameters on `[0, 2π)`.
pub fn params(n: usize) -> Vec<f64> {
    (0..n).map(|i| 2.0 * PI * i as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_band_limited_data() {
        let n = 32;
        let f = |t: f64| 1.0 + (3.0 * t).sin() - 0.5 * (7.0 * t).cos();
        let values: Vec<f64> = params(n).into_iter().map(f).collect();
        let fine = upsample(&values, 4);
        for (i, v) in fine.iter().enumerate() {
            assert!((v - f(2.0 * PI * i as f64 / (4 * n) as f64)).abs() < 1e-13);
        }
        assert!((eval_at(&values, 0.123) - f(0.123)).abs() < 1e-13);
        let d = derivative(&values);
        for (t, v) in params(n).into_iter().zip(&d) {
            assert!((v - (3.0 * (3.0 * t).cos() + 3.5 * (7.0 * t).sin())).abs() < 1e-12);
        }
    }
}
