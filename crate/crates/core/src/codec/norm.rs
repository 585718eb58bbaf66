use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::{CodecModel, LatentSeq};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-dimension latent moments used to standardise diffusion inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Moments over the non-PAD rows of every latent; `masks[i][r]` marks row `r` of latent `i`.
    pub fn from_latents(latents: &[LatentSeq], masks: &[Vec<bool>]) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::Invalid("no latents to fit normalisation".into()));
        };
        let d = first.shape().1;
        let mut sum = Array1::<f64>::zeros(d);
        let mut sq = Array1::<f64>::zeros(d);
        let mut n = 0usize;
        for (z, mask) in latents.iter().zip(masks) {
            for (row, &keep) in z.values.axis_iter(Axis(0)).zip(mask) {
                if keep {
                    sum += &row;
                    sq += &row.mapv(|x| x * x);
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::Invalid("no content rows to fit normalisation".into()));
        }
        let mean = &sum / n as f64;
        let mut std = Vec::with_capacity(d);
        for (j, &m) in mean.iter().enumerate() {
            let var = (sq[j] / n as f64 - m * m).max(0.0);
            let s = var.sqrt();
            if s < STD_FLOOR {
                log::warn!("latent dimension {j} has std {s:e}; clamped to {STD_FLOOR:e}");
            }
            std.push(s.max(STD_FLOOR));
        }
        Ok(Self { mean: mean.to_vec(), std })
    }

    /// Encodes `texts` with the frozen codec and fits moments over their non-PAD rows.
    pub fn fit(texts: &[String], codec: &CodecModel) -> Result<Self> {
        let seqs = texts.iter().map(|t| codec.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let latents = crate::parallel::map(&seqs, |s| codec.encode(s)).into_iter().collect::<Result<Vec<_>>>()?;
        let masks: Vec<_> = seqs.iter().map(|s| s.non_pad_mask()).collect();
        Self::from_latents(&latents, &masks)
    }

    fn check(&self, z: &LatentSeq) -> Result<()> {
        if z.shape().1 != self.width() {
            return Err(Error::shape(self.width(), z.shape().1));
        }
        Ok(())
    }

    /// `(z - mean) / std` per dimension.
    pub fn normalize(&self, z: &LatentSeq) -> Result<LatentSeq> {
        self.check(z)?;
        let mut out = z.clone();
        for mut row in out.values.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, z: &LatentSeq) -> Result<LatentSeq> {
        self.check(z)?;
        let mut out = z.clone();
        for mut row in out.values.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = *x * self.std[j] + self.mean[j];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, seeded};
    use crate::tensor::Mat;

    #[test]
    fn identity_stats_are_a_no_op() {
        let z = LatentSeq::new(randn(&mut seeded(1), 4, 3));
        let s = NormStats::identity(3);
        assert_eq!(s.normalize(&z).unwrap(), z);
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let z = LatentSeq::new(randn(&mut seeded(2), 5, 4) * 3.0);
        let s = NormStats { mean: vec![0.5, -1.0, 2.0, 0.0], std: vec![0.1, 2.0, 5.0, 1e-3] };
        let back = s.denormalize(&s.normalize(&z).unwrap()).unwrap();
        for (a, b) in back.values.iter().zip(z.values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fitted_moments_standardise_content_rows() {
        let mut rng = seeded(3);
        let latents: Vec<_> = (0..50).map(|_| LatentSeq::new(randn(&mut rng, 6, 3) * 2.0 + 1.5)).collect();
        let masks: Vec<_> = (0..50).map(|_| vec![true, true, true, true, false, false]).collect();
        let s = NormStats::from_latents(&latents, &masks).unwrap();
        let normed: Vec<_> = latents.iter().map(|z| s.normalize(z).unwrap()).collect();
        let refit = NormStats::from_latents(&normed, &masks).unwrap();
        for j in 0..3 {
            assert!(refit.mean[j].abs() < 1e-9);
            assert!((refit.std[j] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_dimension_is_floored() {
        let latents = vec![LatentSeq::new(Mat::from_elem((2, 2), 1.0))];
        let s = NormStats::from_latents(&latents, &[vec![true, true]]).unwrap();
        assert_eq!(s.std, vec![STD_FLOOR, STD_FLOOR]);
    }
}
