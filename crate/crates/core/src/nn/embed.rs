//! Fixed (non-trained) sinusoidal encodings, computed outside the graph
//! and fed in as constants.

use ndarray::Array2;

use crate::scalar::Scalar;

/// Interleaved sin/cos positional features: column `2i` is
/// `sin(p / period^(i/half))`, column `2i+1` the matching cosine.
/// `dim` must be even.
pub fn sinusoidal<E: Scalar>(positions: &[f64], dim: usize, max_period: f64) -> Array2<E> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Array2::<E>::zeros((positions.len(), dim));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = (-(i as f64) * max_period.ln() / half as f64).exp();
            let angle = p * freq;
            out[[r, 2 * i]] = E::from_f64(angle.sin());
            out[[r, 2 * i + 1]] = E::from_f64(angle.cos());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_pair_is_raw_sin_cos() {
        // [DERIVED] i=0 has frequency exactly 1.
        let e = sinusoidal::<f64>(&[0.7], 8, 10_000.0);
        assert!((e[[0, 0]] - 0.7f64.sin()).abs() < 1e-12);
        assert!((e[[0, 1]] - 0.7f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn zero_position_is_unit_pattern() {
        // [TRIVIAL] sin(0)=0, cos(0)=1 in every band.
        let e = sinusoidal::<f64>(&[0.0], 6, 10_000.0);
        for i in 0..3 {
            assert_eq!(e[[0, 2 * i]], 0.0);
            assert_eq!(e[[0, 2 * i + 1]], 1.0);
        }
    }

    #[test]
    fn frequencies_decay_geometrically() {
        // [DERIVED] band i uses period^(i/half): for p small enough that
        // sin is monotone, successive sines shrink.
        let e = sinusoidal::<f64>(&[1.0], 16, 10_000.0);
        for i in 0..7 {
            assert!(e[[0, 2 * i]].abs() > e[[0, 2 * (i + 1)]].abs());
        }
    }

    #[test]
    fn distinct_timesteps_distinct_rows() {
        let e = sinusoidal::<f64>(&[3.0, 4.0], 32, 10_000.0);
        let d: f64 = (0..32).map(|j| (e[[0, j]] - e[[1, j]]).abs()).sum();
        assert!(d > 0.1);
    }
}
