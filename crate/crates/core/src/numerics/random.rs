//! Seed derivation and seeded dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a master seed and a path of
/// integer labels, e.g. `(seed, image id)` or `(seed, stage, iteration)`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Domain {
            name: "dropout rate",
            value: rate,
            expected: "0 <= rate < 1",
        });
    }
    Ok(())
}

/// Keep-mask with independent entries, `P(1) = 1 - rate`.
pub(crate) fn keep_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; len];
    }
    (0..len)
        .map(|_| if rng.gen::<f64>() >= rate { 1.0 } else { 0.0 })
        .collect()
}

/// Inverted dropout: `y = x * mask / (1 - rate)`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, rng: &mut R) -> Result<(Tensor, Tensor)> {
    check_rate(rate)?;
    let mask = keep_mask(x.len(), rate, rng);
    let scale = 1.0 / (1.0 - rate);
    let y: Vec<f64> = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, m)| v * m * scale)
        .collect();
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), mask)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_is_identity() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5);
        let (y, mask) = dropout(&x, 0.0, &mut rng_for(1, &[])).unwrap();
        assert_eq!(y, x);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn kept_entries_are_rescaled() {
        let x = Tensor::scalar(2.0);
        let mut rng = rng_for(3, &[]);
        loop {
            let (y, mask) = dropout(&x, 0.5, &mut rng).unwrap();
            if mask.data()[0] == 1.0 {
                assert_eq!(y.data()[0], 4.0);
                break;
            }
            assert_eq!(y.data()[0], 0.0);
        }
    }

    #[test]
    fn rate_of_one_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            dropout(&x, 1.0, &mut rng_for(0, &[])),
            Err(Error::Domain { .. })
        ));
        assert!(dropout(&x, -0.1, &mut rng_for(0, &[])).is_err());
    }

    #[test]
    fn same_seed_same_mask() {
        let x = Tensor::full(&[64], 1.0);
        let a = dropout(&x, 0.3, &mut rng_for(42, &[7])).unwrap();
        let b = dropout(&x, 0.3, &mut rng_for(42, &[7])).unwrap();
        assert_eq!(a, b);
        let c = dropout(&x, 0.3, &mut rng_for(42, &[8])).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn monte_carlo_mean_is_preserved() {
        let x = Tensor::full(&[100_000], 1.0);
        let (y, _) = dropout(&x, 0.5, &mut rng_for(2024, &[])).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }
}
