//! Scalar measures: image similarity (SSIM/SVIM), output-distribution
//! divergence (MDD/MDS), perturbation weights and localization scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Heatmap;
use crate::tensor::Tensor;

/// SSIM stability constant `(0.01·L)²` for dynamic range `L = 1`.
pub const DEFAULT_C1: f64 = 1e-4;
/// SSIM stability constant `(0.03·L)²` for dynamic range `L = 1`.
pub const DEFAULT_C2: f64 = 9e-4;
pub const DEFAULT_SVIM_SIGMA: f64 = 0.15;
/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_IOU_THRESHOLD_FRAC: f64 = 0.2;

/// Structural similarity with whole-image statistics per channel, averaged
/// over channels. Rank-3 tensors are `[C, H, W]`; anything else is treated
/// as a single channel.
pub fn ssim(x: &Tensor, y: &Tensor, c1: f64, c2: f64) -> Result<f64> {
    x.expect_same_shape(y)?;
    if x.is_empty() {
        return Err(Error::Shape("ssim of empty images".into()));
    }
    let channels = if x.ndim() == 3 { x.shape()[0] } else { 1 };
    let per = x.len() / channels;
    let total: f64 = x
        .data()
        .chunks(per)
        .zip(y.data().chunks(per))
        .map(|(a, b)| ssim_channel(a, b, c1, c2))
        .sum();
    Ok(total / channels as f64)
}

fn ssim_channel(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mu_x = x.iter().sum::<f64>() / n;
    let mu_y = y.iter().sum::<f64>() / n;
    let var_x = x.iter().map(|v| (v - mu_x) * (v - mu_x)).sum::<f64>() / n;
    let var_y = y.iter().map(|v| (v - mu_y) * (v - mu_y)).sum::<f64>() / n;
    let cov = x.iter().zip(y).map(|(a, b)| (a - mu_x) * (b - mu_y)).sum::<f64>() / n;
    ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)) / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
}

/// Gaussian of an SSIM value centred on 0.5.
pub fn svim_from_ssim(ssim: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("svim sigma must be > 0, got {sigma}")));
    }
    let d = ssim - 0.5;
    Ok((-(d * d) / (2.0 * sigma * sigma)).exp())
}

/// `exp(−(SSIM(x,y) − 0.5)² / 2σ²)` with default SSIM constants.
pub fn svim(x: &Tensor, y: &Tensor, sigma: f64) -> Result<f64> {
    svim_from_ssim(ssim(x, y, DEFAULT_C1, DEFAULT_C2)?, sigma)
}

/// A probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidDistribution("empty".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self(values))
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.data().to_vec())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

fn paired<'a>(x: &'a ProbDist, y: &'a ProbDist) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(format!(
            "distributions of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.0.iter().zip(&y.0).map(|(&a, &b)| (clamp_prob(a), clamp_prob(b))))
}

/// `Σ_k ((X_k − Y_k)/2)·ln(X_k/Y_k)` over clamped entries.
pub fn mdd(x: &ProbDist, y: &ProbDist) -> Result<f64> {
    Ok(paired(x, y)?.map(|(a, b)| ((a - b) / 2.0) * (a.ln() - b.ln())).sum())
}

/// `1 − MDD`, clamped to `[0, 1]`.
pub fn mds(x: &ProbDist, y: &ProbDist) -> Result<f64> {
    Ok((1.0 - mdd(x, y)?).clamp(0.0, 1.0))
}

/// `KL(X ‖ Y)` in nats over clamped entries.
pub fn kl_divergence(x: &ProbDist, y: &ProbDist) -> Result<f64> {
    Ok(paired(x, y)?.map(|(a, b)| a * (a.ln() - b.ln())).sum())
}

/// Geometric mean of a structural-variability score and an output similarity.
pub fn geometric_weight(svim: f64, mds: f64) -> f64 {
    (svim * mds).sqrt()
}

/// `√(SVIM(I, I′)·MDS(O, O′))` with default constants.
pub fn perturbation_weight(original: &Tensor, perturbed: &Tensor, out: &ProbDist, out_perturbed: &ProbDist) -> Result<f64> {
    let s = svim(original, perturbed, DEFAULT_SVIM_SIGMA)?;
    let m = mds(out, out_perturbed)?;
    Ok(geometric_weight(s, m))
}

/// Binary spatial mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self { height, width, cells })
    }

    /// Mask of an inclusive pixel box `[x0, x1] × [y0, y1]`.
    pub fn from_bbox(height: usize, width: usize, bbox: [usize; 4]) -> Result<Self> {
        let [x0, y0, x1, y1] = bbox;
        if x0 > x1 || y0 > y1 || x1 >= width || y1 >= height {
            return Err(Error::Shape(format!("bbox {bbox:?} outside {width}x{height} image")));
        }
        let cells = (0..height)
            .flat_map(|r| (0..width).map(move |c| (y0..=y1).contains(&r) && (x0..=x1).contains(&c)))
            .collect();
        Ok(Self { height, width, cells })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn transpose(&self) -> BinaryMask {
        let cells = (0..self.width)
            .flat_map(|c| (0..self.height).map(move |r| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        BinaryMask {
            height: self.width,
            width: self.height,
            cells,
        }
    }
}

/// Cells whose value reaches `frac·max(h)`. An all-zero map gives an empty mask.
pub fn threshold_heatmap(h: &Heatmap, frac: f64) -> Result<BinaryMask> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("threshold fraction {frac} outside (0, 1)")));
    }
    let max = h.max();
    let cut = frac * max;
    let cells = h.values().iter().map(|&v| max > 0.0 && v >= cut).collect();
    BinaryMask::new(h.height(), h.width(), cells)
}

/// Intersection over union; 0 when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("mask shapes {:?} and {:?}", a.dims(), b.dims())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Fraction of heatmap mass inside the box mask; 0 for an all-zero heatmap.
pub fn saliency_score(h: &Heatmap, bbox: &BinaryMask) -> Result<f64> {
    if h.dims() != bbox.dims() {
        return Err(Error::Shape(format!(
            "heatmap {:?} and mask {:?} differ in shape",
            h.dims(),
            bbox.dims()
        )));
    }
    let mut inside = 0.0;
    let mut total = 0.0;
    for (&v, &m) in h.values().iter().zip(&bbox.cells) {
        total += v;
        if m {
            inside += v;
        }
    }
    Ok(if total == 0.0 { 0.0 } else { inside / total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Resolution;

    fn dist(v: &[f64]) -> ProbDist {
        ProbDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = Tensor::new(vec![3, 2, 2], (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect()).unwrap();
        assert_eq!(ssim(&x, &x, DEFAULT_C1, DEFAULT_C2).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_shifted_constants() {
        let x = Tensor::filled(&[1, 4, 4], 0.2);
        let y = Tensor::filled(&[1, 4, 4], 0.7);
        // variances vanish, leaving the luminance term
        let expected = (2.0 * 0.2 * 0.7 + DEFAULT_C1) / (0.04 + 0.49 + DEFAULT_C1);
        let got = ssim(&x, &y, DEFAULT_C1, DEFAULT_C2).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!(got < 1.0);
    }

    #[test]
    fn ssim_of_complement_has_negative_structure() {
        let x = Tensor::vector(vec![0.2, 0.8, 0.2, 0.8]);
        let y = x.map(|v| 1.0 - v);
        // mu = 0.5 for both, var = 0.09, cov = -0.09
        let expected = ((0.5 + DEFAULT_C1) * (-0.18 + DEFAULT_C2)) / ((0.5 + DEFAULT_C1) * (0.18 + DEFAULT_C2));
        let got = ssim(&x, &y, DEFAULT_C1, DEFAULT_C2).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(got < 0.0);
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(ssim(&Tensor::zeros(&[2]), &Tensor::zeros(&[3]), DEFAULT_C1, DEFAULT_C2).is_err());
    }

    #[test]
    fn svim_values() {
        assert_eq!(svim_from_ssim(0.5, 0.15).unwrap(), 1.0);
        let edge = (-0.25f64 / 0.045).exp();
        assert!((svim_from_ssim(1.0, 0.15).unwrap() - edge).abs() < 1e-15);
        assert!((svim_from_ssim(0.0, 0.15).unwrap() - edge).abs() < 1e-15);
        assert!((edge - 0.003866).abs() < 1e-6);
        assert!(matches!(svim_from_ssim(0.5, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn mdd_worked_value() {
        let x = dist(&[0.7, 0.3]);
        let y = dist(&[0.5, 0.5]);
        let v = mdd(&x, &y).unwrap();
        assert!((v - (0.1 * 1.4f64.ln() - 0.1 * 0.6f64.ln())).abs() < 1e-15);
        assert!((v - 0.084730).abs() < 1e-6);
        assert!((mds(&x, &y).unwrap() - 0.915270).abs() < 1e-6);
        assert_eq!(mdd(&x, &x).unwrap(), 0.0);
        assert_eq!(mds(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn mds_clamps_to_zero() {
        let e = 1e-6;
        let x = dist(&[1.0 - e, e]);
        let y = dist(&[e, 1.0 - e]);
        assert!(1.0 - mdd(&x, &y).unwrap() < -1.0);
        assert_eq!(mds(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn distribution_validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbDist::new(vec![]).is_err());
        assert!(mdd(&dist(&[1.0]), &dist(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn weight_values() {
        assert!((geometric_weight(0.25, 0.81) - 0.45).abs() < 1e-15);
        assert_eq!(geometric_weight(0.7, 0.0), 0.0);
        let img = Tensor::filled(&[3, 4, 4], 0.25).map(|v| v * 2.0);
        let p = dist(&[0.2, 0.8]);
        let w = perturbation_weight(&img, &img, &p, &p).unwrap();
        assert!((w - (-0.25f64 / 0.045).exp().sqrt()).abs() < 1e-15);
        assert!((w - 0.06218).abs() < 1e-5);
    }

    #[test]
    fn threshold_cases() {
        let h = Heatmap::new(2, 2, vec![1.0, 1.0, 1.0, 1.0], Resolution::Input).unwrap();
        assert_eq!(threshold_heatmap(&h, 0.2).unwrap().count(), 4);
        let h = Heatmap::new(2, 2, vec![1.0, 0.1, 0.3, 0.0], Resolution::Input).unwrap();
        let m = threshold_heatmap(&h, 0.2).unwrap();
        assert_eq!(m.cells(), &[true, false, true, false]);
        let z = Heatmap::new(2, 2, vec![0.0; 4], Resolution::Input).unwrap();
        assert_eq!(threshold_heatmap(&z, 0.2).unwrap().count(), 0);
    }

    #[test]
    fn iou_cases() {
        let a = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
        let b = BinaryMask::new(2, 2, vec![false, true, false, true]).unwrap();
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let empty = BinaryMask::new(2, 2, vec![false; 4]).unwrap();
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        let other = BinaryMask::new(1, 4, vec![true; 4]).unwrap();
        assert!(iou(&a, &other).is_err());
    }

    #[test]
    fn saliency_cases() {
        let h = Heatmap::new(2, 2, vec![0.5; 4], Resolution::Input).unwrap();
        let half = BinaryMask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert_eq!(saliency_score(&h, &half).unwrap(), 0.5);
        let h = Heatmap::new(2, 2, vec![0.0, 0.9, 0.0, 0.0], Resolution::Input).unwrap();
        assert_eq!(saliency_score(&h, &half).unwrap(), 1.0);
        let z = Heatmap::new(2, 2, vec![0.0; 4], Resolution::Input).unwrap();
        assert_eq!(saliency_score(&z, &half).unwrap(), 0.0);
    }

    #[test]
    fn bbox_mask() {
        let m = BinaryMask::from_bbox(3, 4, [1, 0, 2, 1]).unwrap();
        assert_eq!(m.count(), 4);
        assert!(m.get(0, 1) && m.get(1, 2) && !m.get(2, 1) && !m.get(0, 0));
        assert!(BinaryMask::from_bbox(3, 4, [0, 0, 4, 0]).is_err());
    }
}
