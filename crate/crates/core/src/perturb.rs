//! Noise-plus-mask perturbations of an input image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const DEFAULT_COUNT: usize = 8;
pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_COUNT,
            alpha: DEFAULT_ALPHA,
            seed: 42,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("perturbation count must be >= 1".into()));
        }
        check_alpha(self.alpha)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Returns `(I + alpha·N) ⊙ M`.
///
/// All `C·H·W` Gaussian values are drawn first (row-major), then one
/// Bernoulli(1 − alpha) keep-draw per spatial position; a dropped position is
/// zero in every channel. Values are not clamped.
pub fn perturb_image(image: &Tensor, alpha: f64, rng: &mut Prng) -> Result<Tensor> {
    check_alpha(alpha)?;
    let (c, h, w) = image.chw()?;
    let noise: Vec<f64> = (0..c * h * w).map(|_| rng.next_gaussian()).collect();
    let keep: Vec<bool> = (0..h * w).map(|_| rng.next_bernoulli(1.0 - alpha)).collect();
    let data = image
        .data()
        .iter()
        .zip(&noise)
        .enumerate()
        .map(|(idx, (&x, &n))| if keep[idx % (h * w)] { x + alpha * n } else { 0.0 })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// The original image and its perturbed variants.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub original: Tensor,
    pub perturbed: Vec<Tensor>,
    pub config: PerturbationConfig,
}

/// Draws `config.n` perturbations from one Prng stream seeded with `config.seed`.
pub fn generate_set(image: &Tensor, config: &PerturbationConfig) -> Result<PerturbationSet> {
    config.validate()?;
    let mut rng = Prng::new(config.seed);
    let perturbed = (0..config.n)
        .map(|_| perturb_image(image, config.alpha, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationSet {
        original: image.clone(),
        perturbed,
        config: *config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Tensor {
        Tensor::new(vec![3, 4, 5], (0..60).map(|i| i as f64 / 60.0).collect()).unwrap()
    }

    #[test]
    fn alpha_zero_is_identity() {
        let img = ramp();
        let out = perturb_image(&img, 0.0, &mut Prng::new(1)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn alpha_one_zeroes_everything() {
        let out = perturb_image(&ramp(), 1.0, &mut Prng::new(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn alpha_out_of_range() {
        assert!(matches!(perturb_image(&ramp(), 1.5, &mut Prng::new(1)), Err(Error::Config(_))));
        assert!(matches!(perturb_image(&ramp(), -0.1, &mut Prng::new(1)), Err(Error::Config(_))));
        let cfg = PerturbationConfig { n: 0, ..Default::default() };
        assert!(generate_set(&ramp(), &cfg).is_err());
    }

    #[test]
    fn mask_is_shared_across_channels() {
        let img = Tensor::filled(&[3, 10, 10], 0.5);
        let mut rng = Prng::new(77);
        let out = perturb_image(&img, 0.4, &mut rng).unwrap();
        let mut replay = Prng::new(77);
        let noise: Vec<f64> = (0..300).map(|_| replay.next_gaussian()).collect();
        for pos in 0..100 {
            let zeros = (0..3).filter(|c| out.data()[c * 100 + pos] == 0.0).count();
            assert!(zeros == 0 || zeros == 3);
            if zeros == 0 {
                for c in 0..3 {
                    assert_eq!(out.data()[c * 100 + pos], 0.5 + 0.4 * noise[c * 100 + pos]);
                }
            }
        }
    }

    #[test]
    fn set_sizes_and_determinism() {
        let img = ramp();
        let cfg = PerturbationConfig { n: 1, alpha: 0.4, seed: 3 };
        assert_eq!(generate_set(&img, &cfg).unwrap().perturbed.len(), 1);
        let cfg = PerturbationConfig::default();
        let a = generate_set(&img, &cfg).unwrap();
        let b = generate_set(&img, &cfg).unwrap();
        assert_eq!(a.perturbed.len(), 8);
        assert_eq!(a, b);
        assert_ne!(a.perturbed[0], a.perturbed[1]);
    }
}
