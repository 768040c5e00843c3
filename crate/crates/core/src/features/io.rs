use std::path::Path;

use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::losses::Source;
use crate::numerics::params::ByteReader;

pub const FEATURE_MAGIC: &[u8; 4] = b"MELF";
const FEATURE_VERSION: u32 = 1;

impl FeatureMatrix {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values().len());
        buf.extend_from_slice(FEATURE_MAGIC);
        buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.frames() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dims() as u32).to_le_bytes());
        for v in self.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Parses a feature file. The source tag is not stored on disk.
    pub fn from_bytes(bytes: &[u8], source: Source) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format("bad feature magic".into()));
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!(
                "unsupported feature version {version}"
            )));
        }
        let t = r.u32()? as usize;
        let d = r.u32()? as usize;
        let payload = &bytes[r.pos..];
        if t.checked_mul(d).and_then(|n| n.checked_mul(4)) != Some(payload.len()) {
            return Err(Error::Format(format!(
                "header {t}x{d} does not match {} payload bytes",
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureMatrix::new(t, d, values, source).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn write_features(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    std::fs::write(path, f.to_bytes())?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>, source: Source) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&std::fs::read(path)?, source)
}

/// 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::Data(e.to_string()))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        w.write_sample(v).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.finalize().map_err(|e| Error::Data(e.to_string()))
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<f32>, u32)> {
    let mut r = hound::WavReader::open(path).map_err(|e| Error::Format(e.to_string()))?;
    let spec = r.spec();
    if spec.channels != 1
        || spec.sample_format != hound::SampleFormat::Int
        || spec.bits_per_sample != 16
    {
        return Err(Error::Format("expected 16-bit PCM mono".into()));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / i16::MAX as f32))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f =
            FeatureMatrix::new(3, 2, vec![1.0, -2.0, 3.5, 0.0, -0.0, 7.25], Source::Real).unwrap();
        let path = dir.path().join("x.melf");
        write_features(&path, &f).unwrap();
        assert_eq!(read_features(&path, Source::Real).unwrap(), f);
    }

    #[test]
    fn truncated_and_mismatched_headers() {
        let f = FeatureMatrix::new(3, 2, vec![1.0; 6], Source::Real).unwrap();
        let bytes = f.to_bytes();
        for cut in [0, 2, 10, bytes.len() - 1] {
            assert!(matches!(
                FeatureMatrix::from_bytes(&bytes[..cut], Source::Real),
                Err(Error::Format(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[8] = 4; // T = 4 but payload holds 3 rows
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad, Source::Real),
            Err(Error::Format(_))
        ));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad, Source::Real),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let s: Vec<f32> = (0..500).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &s, 16000).unwrap();
        let (back, sr) = read_wav(&path).unwrap();
        assert_eq!(sr, 16000);
        assert!(back.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    proptest! {
        #[test]
        fn bytes_round_trip_bit_exact(t in 1usize..6, d in 1usize..6, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f32> = (0..t * d).map(|_| rng.gen_range(-1e3..1e3)).collect();
            let f = FeatureMatrix::new(t, d, vals, Source::Real).unwrap();
            let back = FeatureMatrix::from_bytes(&f.to_bytes(), Source::Real).unwrap();
            prop_assert_eq!(back.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
