//! Source-filter waveform renderer for the toy phoneme inventory.

use rand::Rng;
use rand_distr::StandardNormal;

use super::lexicon::Lexicon;

pub const SAMPLE_RATE: u32 = 8000;
/// Samples per 10 ms frame at [`SAMPLE_RATE`].
pub const HOP: usize = 80;
/// Extra samples so that `frames` hops yield exactly `frames` analysis windows.
pub const TAIL: usize = 120;

const BANDWIDTHS: [f64; 3] = [80.0, 120.0, 180.0];
const FADE: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhoneAcoustics {
    /// RMS of the voiced source.
    pub voicing: f64,
    /// (frequency Hz, relative gain)
    pub formants: [(f64, f64); 3],
    /// (low Hz, high Hz, RMS)
    pub noise: Option<(f64, f64, f64)>,
    /// Silent closure over the first half.
    pub closure: bool,
}

const fn voiced(v: f64, f: [(f64, f64); 3]) -> PhoneAcoustics {
    PhoneAcoustics {
        voicing: v,
        formants: f,
        noise: None,
        closure: false,
    }
}

const fn noisy(v: f64, lo: f64, hi: f64, amp: f64, closure: bool) -> PhoneAcoustics {
    PhoneAcoustics {
        voicing: v,
        formants: [(200.0, 1.0), (1000.0, 0.1), (2500.0, 0.05)],
        noise: Some((lo, hi, amp)),
        closure,
    }
}

const SILENCE: PhoneAcoustics = PhoneAcoustics {
    voicing: 0.0,
    formants: [(0.0, 0.0); 3],
    noise: None,
    closure: false,
};

pub fn acoustics(symbol: &str) -> PhoneAcoustics {
    match symbol {
        "a" => voiced(0.20, [(730.0, 1.0), (1090.0, 0.5), (2440.0, 0.25)]),
        "e" => voiced(0.18, [(530.0, 1.0), (1840.0, 0.6), (2480.0, 0.3)]),
        "i" => voiced(0.16, [(270.0, 1.0), (2290.0, 0.5), (3010.0, 0.35)]),
        "o" => voiced(0.20, [(570.0, 1.0), (840.0, 0.7), (2410.0, 0.2)]),
        "u" => voiced(0.16, [(300.0, 1.0), (870.0, 0.5), (2240.0, 0.15)]),
        "m" => voiced(0.07, [(250.0, 1.0), (1100.0, 0.3), (2300.0, 0.1)]),
        "n" => voiced(0.07, [(250.0, 1.0), (1700.0, 0.35), (2600.0, 0.15)]),
        "N" => voiced(0.07, [(250.0, 1.0), (2000.0, 0.4), (2800.0, 0.1)]),
        "l" => voiced(0.10, [(360.0, 1.0), (1300.0, 0.5), (2700.0, 0.3)]),
        "r" => voiced(0.10, [(420.0, 1.0), (1300.0, 0.6), (1600.0, 0.5)]),
        "w" => voiced(0.09, [(290.0, 1.0), (610.0, 0.6), (2150.0, 0.1)]),
        "j" => voiced(0.09, [(260.0, 1.0), (2070.0, 0.6), (3020.0, 0.3)]),
        "b" => noisy(0.03, 300.0, 1500.0, 0.05, true),
        "d" => noisy(0.03, 2500.0, 3900.0, 0.06, true),
        "g" => noisy(0.03, 1500.0, 2600.0, 0.06, true),
        "p" => noisy(0.0, 300.0, 1500.0, 0.07, true),
        "t" => noisy(0.0, 2800.0, 3950.0, 0.08, true),
        "k" => noisy(0.0, 1600.0, 2800.0, 0.08, true),
        "f" => noisy(0.0, 1000.0, 3950.0, 0.03, false),
        "v" => noisy(0.04, 1000.0, 3950.0, 0.025, false),
        "s" => noisy(0.0, 3000.0, 3950.0, 0.10, false),
        "z" => noisy(0.04, 3000.0, 3950.0, 0.06, false),
        "h" => noisy(0.0, 400.0, 3000.0, 0.03, false),
        "S" => noisy(0.0, 1800.0, 3200.0, 0.09, false),
        "C" => noisy(0.0, 1500.0, 3000.0, 0.10, true),
        "T" => noisy(0.0, 1200.0, 3950.0, 0.02, false),
        _ => SILENCE,
    }
}

/// Per-speaker source and vocal-tract parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voice {
    /// Pitch period in samples.
    pub period: usize,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    pub gain: f64,
}

impl Voice {
    pub const NEUTRAL: Voice = Voice {
        period: 57,
        formant_scale: 1.0,
        gain: 1.0,
    };
}

fn envelope(a: &PhoneAcoustics, f: f64, scale: f64) -> f64 {
    a.formants
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&(fc, g), bw)| g / (1.0 + ((f - fc * scale) / bw).powi(2)))
        .sum::<f64>()
        / (1.0 + f / 1000.0)
}

/// One pitch period of the voiced source shaped by the formant envelope, unit RMS.
fn voiced_period(a: &PhoneAcoustics, voice: &Voice) -> Vec<f64> {
    let p = voice.period;
    let sr = SAMPLE_RATE as f64;
    let mut out = vec![0.0; p];
    let mut k = 1;
    while (k as f64) * sr / (p as f64) < sr / 2.0 {
        let f = k as f64 * sr / p as f64;
        let amp = envelope(a, f, voice.formant_scale);
        let phase = 0.37 * (k * k) as f64;
        for (n, v) in out.iter_mut().enumerate() {
            *v += amp * (2.0 * std::f64::consts::PI * k as f64 * n as f64 / p as f64 + phase).sin();
        }
        k += 1;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / p as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Constant-peak-gain band-pass biquad applied to white noise, normalized to unit RMS.
fn band_noise<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let fc = (lo * hi).sqrt();
    let q = fc / (hi - lo);
    let w0 = 2.0 * std::f64::consts::PI * fc / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.sample(StandardNormal);
        let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
        x2 = x1;
        x1 = x;
        y2 = y1;
        y1 = y;
        out.push(y);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

/// Renders `(phoneme id, frames)` segments into a waveform whose log-mel analysis has
/// exactly `Σ frames` frames. `noise_rms` adds stationary white background noise.
pub fn render<R: Rng + ?Sized>(
    lex: &Lexicon,
    segments: &[(usize, usize)],
    voice: &Voice,
    noise_rms: f64,
    rng: &mut R,
) -> Vec<f32> {
    let total: usize = segments.iter().map(|s| s.1 * HOP).sum::<usize>() + TAIL;
    let mut out = vec![0.0f64; total];
    let mut start = 0;
    for &(id, frames) in segments {
        let n = frames * HOP;
        let a = acoustics(lex.symbol(id).unwrap_or(""));
        let seg = &mut out[start..start + n];
        let onset = if a.closure { n / 2 } else { 0 };
        if a.voicing > 0.0 {
            let period = voiced_period(&a, voice);
            for (i, v) in seg.iter_mut().enumerate() {
                *v += a.voicing * period[(start + i) % voice.period];
            }
        }
        if let Some((lo, hi, amp)) = a.noise {
            let noise = band_noise(
                n - onset,
                lo * voice.formant_scale,
                (hi * voice.formant_scale).min(3990.0),
                rng,
            );
            for (v, x) in seg[onset..].iter_mut().zip(noise) {
                *v += amp * x;
            }
        }
        let fade = FADE.min(n / 2);
        for i in 0..fade {
            let w = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / fade as f64).cos();
            seg[i] *= w;
            seg[n - 1 - i] *= w;
        }
        start += n;
    }
    out.iter()
        .map(|v| {
            let noise: f64 = if noise_rms > 0.0 {
                noise_rms * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            ((v * voice.gain + noise) as f32).clamp(-1.0, 1.0)
        })
        .collect()
}
