use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::losses::Source;

/// Additive floor inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

const WINDOW_MS: usize = 25;
const HOP_MS: usize = 10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK-style triangular filters with unit peak, spaced evenly on the mel scale
/// between 0 Hz and Nyquist.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub n_mels: usize,
    edges_hz: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)`
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, c, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate as f64 / n_fft as f64;
                let w = if f > lo && f <= c {
                    (f - lo) / (c - lo)
                } else if f > c && f < hi {
                    (hi - f) / (hi - c)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Self {
            sample_rate,
            n_fft,
            n_mels,
            edges_hz,
            weights,
        }
    }

    pub fn center_hz(&self, band: usize) -> f64 {
        self.edges_hz[band + 1]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        let n_bins = self.n_fft / 2 + 1;
        (0..self.n_mels)
            .map(|m| {
                self.weights[m * n_bins..(m + 1) * n_bins]
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}

/// Log-mel filterbank energies: 25 ms Hann window, 10 ms hop, power spectrum,
/// `ln(energy + 1e-10)`. Frame count is `1 + floor((N − window)/hop)`.
pub fn logmel(samples: &[f32], sample_rate: u32, n_mels: usize) -> Result<FeatureMatrix> {
    if sample_rate != 8000 && sample_rate != 16000 {
        return Err(Error::Data(format!(
            "unsupported sample rate {sample_rate}"
        )));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite audio sample".into()));
    }
    let win = sample_rate as usize * WINDOW_MS / 1000;
    let hop = sample_rate as usize * HOP_MS / 1000;
    if samples.len() < win {
        return Err(Error::Data(format!(
            "signal of {} samples shorter than one {win}-sample frame",
            samples.len()
        )));
    }
    let n_fft = win.next_power_of_two();
    let bank = MelFilterbank::new(sample_rate, n_fft, n_mels);
    let frames = 1 + (samples.len() - win) / hop;
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut values = Vec::with_capacity(frames * n_mels);
    for t in 0..frames {
        let seg = &samples[t * hop..t * hop + win];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(seg[i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        values.extend(
            bank.apply(&power)
                .into_iter()
                .map(|e| (e + LOG_FLOOR).ln() as f32),
        );
    }
    FeatureMatrix::new(frames, n_mels, values, Source::Real)
}
