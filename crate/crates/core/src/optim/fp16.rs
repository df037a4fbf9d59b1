//! 16-bit optimizer-state storage by dynamic rescaling.

use half::f16;

use crate::tensor::Scalar;

/// Largest finite FP16 value.
pub const FLOAT16_MAX: f64 = 65504.0;
/// Additive guard in the rescale divisor.
pub const RESCALE_EPS: f64 = 1e-8;

/// Divides `m` by `max|m| / 65504 + 1e-8` and returns the scaled buffer with
/// that divisor. With `emulate_fp16` every scaled value is then rounded to the
/// nearest FP16 number.
pub fn fp16_state_rescale<T: Scalar>(m: &[T], emulate_fp16: bool) -> (Vec<T>, f64) {
    let max = m.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max);
    let divisor = max / FLOAT16_MAX + RESCALE_EPS;
    let scaled = m
        .iter()
        .map(|v| {
            let s = v.to_f64() / divisor;
            T::from_f64(if emulate_fp16 {
                f16::from_f64(s).to_f64()
            } else {
                s
            })
        })
        .collect();
    (scaled, divisor)
}

/// Inverse of [`fp16_state_rescale`] up to the FP16 rounding.
pub fn fp16_state_unscale<T: Scalar>(scaled: &[T], divisor: f64) -> Vec<T> {
    scaled
        .iter()
        .map(|v| T::from_f64(v.to_f64() * divisor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_examples() {
        let (z, d) = fp16_state_rescale(&[0.0f32; 4], true);
        assert_eq!(z, vec![0.0; 4]);
        assert_eq!(d, 1e-8);

        let m = [65504.0f64, -12.5, 3.0];
        let (s, d) = fp16_state_rescale(&m, false);
        assert_eq!(d, 1.0 + 1e-8);
        for (a, b) in s.iter().zip(&m) {
            assert!(((a - b) / b).abs() < 1e-7);
        }

        let (s, _) = fp16_state_rescale(&[1.0f64], false);
        assert!((s[0] - 1.0 / (1.0 / 65504.0 + 1e-8)).abs() < 1e-9);
        assert!((s[0] - 65461.1).abs() < 0.05);
        assert!(s[0] <= FLOAT16_MAX);
    }

    #[test]
    fn pure_round_trip_is_exact_to_storage_precision() {
        let m: Vec<f32> = (0..200)
            .map(|i| ((i as f32) * 0.731).sin() * 1e-3)
            .collect();
        let (s, d) = fp16_state_rescale(&m, false);
        for (a, b) in fp16_state_unscale(&s, d).iter().zip(&m) {
            assert!((a - b).abs() <= 2.0 * f32::EPSILON * b.abs());
        }
        let m: Vec<f64> = m.iter().map(|&v| v as f64).collect();
        let (s, d) = fp16_state_rescale(&m, false);
        for (a, b) in fp16_state_unscale(&s, d).iter().zip(&m) {
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b.abs());
        }
    }
}
