//! Audio to spectrogram grid: WAV decoding, resampling, log-mel features,
//! padding and the patch-window layout.

mod layout;
mod mel;
mod resample;
mod wav;

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

pub use layout::{inverse_window_reshape, spectrogram_grid, token_sources, window_reshape, TokenGrid, TokenSource};
pub use mel::{hz_to_mel, log_mel, magnitude_spectrum, mel_to_hz, pad_frames, MelConfig, MelFilterbank, MelSpectrogram};
pub use resample::{resample, ResampleMethod};
pub use wav::{decode_wav, encode_wav, load_wav, write_wav, AudioClip, WavEncoding};

use crate::archive::{Archive, Entry};
use crate::error::{Error, Result};

/// Settings for turning a clip into a fixed-size spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub mel: MelConfig,
    /// Frame count after padding.
    pub target_frames: usize,
    pub resample: ResampleMethod,
    /// Cut clips that are longer than `target_frames` instead of failing.
    pub truncate: bool,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { mel: MelConfig::default(), target_frames: 1024, resample: ResampleMethod::Linear, truncate: false }
    }
}

impl FrontendConfig {
    /// Stable text form of every setting that affects the features.
    fn fingerprint(&self) -> String {
        let m = &self.mel;
        format!(
            "sr={} win={} hop={} mels={} fmin={} fmax={} eps={} short={} frames={} resample={:?} truncate={}",
            m.sample_rate,
            m.win,
            m.hop,
            m.n_mels,
            m.f_min,
            m.f_max(),
            m.eps,
            m.allow_short,
            self.target_frames,
            self.resample,
            self.truncate
        )
    }
}

/// Padded log-mel features of a decoded clip.
pub fn clip_features(clip: &AudioClip, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    let clip = resample(clip, cfg.mel.sample_rate, cfg.resample);
    let m = log_mel(&clip, &cfg.mel)?;
    pad_frames(&m, cfg.target_frames, cfg.mel.floor(), cfg.truncate)
}

/// Features of a WAV file, going through `cache` when one is given.
pub fn wav_features(path: &Path, cfg: &FrontendConfig, cache: Option<&FeatureCache>) -> Result<MelSpectrogram> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let key = cache.map(|_| FeatureCache::key(&bytes, cfg));
    if let (Some(c), Some(k)) = (cache, &key) {
        if let Some(m) = c.get(k)? {
            return Ok(m);
        }
    }
    let m = clip_features(&decode_wav(&bytes)?, cfg)?;
    if let (Some(c), Some(k)) = (cache, &key) {
        c.put(k, &m)?;
    }
    Ok(m)
}

/// On-disk feature store, one archive per (audio content, settings) hash.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        Ok(Self { dir })
    }

    /// SHA-256 of the raw file bytes and the settings fingerprint, as hex.
    pub fn key(audio: &[u8], cfg: &FrontendConfig) -> String {
        let mut h = Sha256::new();
        h.update(audio);
        h.update([0u8]);
        h.update(cfg.fingerprint().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.amba"))
    }

    pub fn get(&self, key: &str) -> Result<Option<MelSpectrogram>> {
        let p = self.path(key);
        if !p.exists() {
            return Ok(None);
        }
        let a = Archive::load(&p)?;
        let e = a.get("mel").ok_or_else(|| Error::Format(format!("{} has no mel entry", p.display())))?;
        Ok(Some(MelSpectrogram::new(e.to_tensor()?)?))
    }

    pub fn put(&self, key: &str, m: &MelSpectrogram) -> Result<()> {
        let mut a = Archive::new();
        a.push(Entry::tensor("mel", &m.values))?;
        a.save(self.path(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> FrontendConfig {
        FrontendConfig { target_frames: 64, ..Default::default() }
    }

    #[test]
    fn ten_second_clip_is_padded_to_1024_by_64() {
        let clip = AudioClip::new(vec![0.0; 320_000], 32000);
        let m = clip_features(&clip, &FrontendConfig::default()).unwrap();
        assert_eq!((m.frames(), m.bins()), (1024, 64));
    }

    #[test]
    fn cache_returns_identical_features() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        let samples: Vec<f32> = (0..6400).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
        write_wav(&wav, &AudioClip::new(samples, 16000), WavEncoding::Pcm16).unwrap();
        let cache = FeatureCache::new(dir.path().join("cache")).unwrap();
        let direct = wav_features(&wav, &cfg(), None).unwrap();
        let first = wav_features(&wav, &cfg(), Some(&cache)).unwrap();
        let second = wav_features(&wav, &cfg(), Some(&cache)).unwrap();
        assert_eq!(direct, first);
        assert_eq!(first, second);
        assert_eq!(fs::read_dir(dir.path().join("cache")).unwrap().count(), 1);
    }

    #[test]
    fn cache_key_depends_on_settings() {
        let a = FeatureCache::key(b"abc", &cfg());
        let mut other = cfg();
        other.mel.n_mels = 32;
        assert_ne!(a, FeatureCache::key(b"abc", &other));
        assert_eq!(a.len(), 64);
    }
}
