use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fixed sinusoidal position table `[s × h]`: `sin(p / 10000^(2i/h))` in even
/// slots and the matching cosine in odd slots.
pub fn sinusoidal_positions<T: Scalar>(s: usize, h: usize) -> Result<Tensor<T>> {
    if !h.is_multiple_of(2) {
        return Err(Error::config(format!("positional width {h} must be even")));
    }
    let mut data = Vec::with_capacity(s * h);
    for p in 0..s {
        for i in 0..h / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / h as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Tensor::new(vec![s, h], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_and_range() {
        let t = sinusoidal_positions::<f64>(16, 8).unwrap();
        let d = t.data();
        for i in 0..4 {
            assert_eq!(d[2 * i], 0.0);
            assert_eq!(d[2 * i + 1], 1.0);
        }
        assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((d[8] - 1f64.sin()).abs() < 1e-15);
        assert!((d[8] - 0.84147).abs() < 1e-5);
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(matches!(
            sinusoidal_positions::<f32>(4, 7),
            Err(Error::Config(_))
        ));
    }
}
