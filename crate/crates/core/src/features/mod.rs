//! Log-mel features, feature files, and masking/augmentation policies.

mod augment;
mod io;
mod mel;

pub use augment::{
    contrastive_time_mask, freq_warp, span_mask, specaugment, warp_frequency, AugmentPolicy,
    MaskFill, SpanMask,
};
pub use io::{read_features, read_wav, write_features, write_wav, FEATURE_MAGIC};
pub use mel::{logmel, MelFilterbank, LOG_FLOOR};

use crate::error::{Error, Result};
use crate::losses::Source;
use crate::numerics::Tensor;

pub const DEFAULT_MEL_DIMS: usize = 80;

/// `T×D` log-mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f32>,
    pub source: Source,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f32>, source: Source) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::Data(format!(
                "feature matrix must be non-empty, got {frames}x{dims}"
            )));
        }
        if values.len() != frames * dims {
            return Err(Error::Data(format!(
                "{frames}x{dims} features need {} values, got {}",
                frames * dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            frames,
            dims,
            values,
            source,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dims + d]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.frames, self.dims], self.values.clone()).expect("consistent shape")
    }

    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64) as f32
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Per-dimension mean/variance statistics of a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

impl FeatureStats {
    pub fn estimate<'a>(feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in feats {
            if sum.is_empty() {
                sum = vec![0.0; f.dims()];
                sq = vec![0.0; f.dims()];
            } else if sum.len() != f.dims() {
                return Err(Error::Data("feature dims differ across corpus".into()));
            }
            for t in 0..f.frames() {
                for (d, &v) in f.frame(t).iter().enumerate() {
                    sum[d] += v as f64;
                    sq[d] += (v as f64) * (v as f64);
                }
            }
            n += f.frames();
        }
        if n == 0 {
            return Err(Error::Data("no frames to estimate statistics".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let inv_std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (1.0 / (s / n as f64 - m * m).max(1e-8).sqrt()) as f32)
            .collect();
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        })
    }

    pub fn apply(&self, f: &FeatureMatrix) -> FeatureMatrix {
        let mut out = f.clone();
        let d = f.dims();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) * self.inv_std[i % d];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(FeatureMatrix::new(0, 80, vec![], Source::Real).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![0.0, f32::NAN], Source::Real).is_err());
        assert!(FeatureMatrix::new(1, 2, vec![0.0], Source::Real).is_err());
    }

    #[test]
    fn normalization_gives_unit_stats() {
        let a = FeatureMatrix::new(2, 2, vec![1.0, 10.0, 3.0, 30.0], Source::Real).unwrap();
        let stats = FeatureStats::estimate([&a]).unwrap();
        let n = stats.apply(&a);
        assert!((n.get(0, 0) + 1.0).abs() < 1e-6 && (n.get(1, 1) - 1.0).abs() < 1e-6);
    }
}
