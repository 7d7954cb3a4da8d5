//! Log-mel features: Hann-windowed STFT magnitude, HTK triangular filters, `ln(x + eps)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::frontend::wav::AudioClip;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    /// FFT size and window length.
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper filterbank edge; Nyquist when `None`.
    pub f_max: Option<f64>,
    pub eps: f64,
    /// Accept clips shorter than one window by zero-padding them.
    pub allow_short: bool,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 32000, win: 1024, hop: 320, n_mels: 64, f_min: 0.0, f_max: None, eps: 1e-10, allow_short: false }
    }
}

impl MelConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Frames produced for `n` samples: one frame centred on every hop.
    pub fn frame_count(&self, n: usize) -> usize {
        (n / self.hop).max(1)
    }

    /// Value of a silent cell.
    pub fn floor(&self) -> f32 {
        self.eps.ln() as f32
    }
}

/// `T x F` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f32>,
}

impl MelSpectrogram {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        values.dims2()?;
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let f = self.bins();
        &self.values.data()[t * f..(t + 1) * f]
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `[n_mels, win / 2 + 1]`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
    /// Centre frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.win / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
        let edges: Vec<f64> =
            (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.win as f64;
        let weights = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self { weights, centers: edges[1..=cfg.n_mels].to_vec() }
    }

    /// Index of the filter whose centre is closest to `hz`.
    pub fn nearest(&self, hz: f64) -> usize {
        self.centers
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - hz).abs().total_cmp(&(b.1 - hz).abs()))
            .map(|(i, _)| i)
            .unwrap()
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// `|FFT|` of one Hann-windowed frame, `len / 2 + 1` bins.
pub fn magnitude_spectrum(frame: &[f32]) -> Vec<f64> {
    let n = frame.len();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let w = hann(n);
    let mut buf: Vec<Complex<f64>> = frame.iter().zip(&w).map(|(&s, &w)| Complex::new(s as f64 * w, 0.0)).collect();
    fft.process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Centre-padded STFT magnitudes, `frames x (win / 2 + 1)`.
fn stft_magnitudes(samples: &[f32], cfg: &MelConfig) -> Vec<Vec<f64>> {
    let half = cfg.win / 2;
    let n = samples.len();
    // Reflect padding when the clip is long enough, zeros otherwise.
    let padded: Vec<f32> = if n > half {
        let mut p = Vec::with_capacity(n + 2 * half);
        p.extend((1..=half).rev().map(|i| samples[i]));
        p.extend_from_slice(samples);
        p.extend((n - 1 - half..n - 1).rev().map(|i| samples[i]));
        p
    } else {
        let mut p = vec![0.0; half];
        p.extend_from_slice(samples);
        p.resize(n.max(cfg.win) + 2 * half, 0.0);
        p
    };
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.win);
    let window = hann(cfg.win);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.win];
    (0..cfg.frame_count(n))
        .map(|t| {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[start + i] as f64 * window[i], 0.0);
            }
            fft.process(&mut buf);
            buf[..half + 1].iter().map(|c| c.norm()).collect()
        })
        .collect()
}

/// Log-mel spectrogram of a clip already at `cfg.sample_rate`.
pub fn log_mel(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Value(format!("clip is at {} Hz, features expect {} Hz", clip.sample_rate, cfg.sample_rate)));
    }
    if clip.samples.len() < cfg.win && !cfg.allow_short {
        return Err(Error::Value(format!(
            "clip has {} samples, shorter than one {}-sample window",
            clip.samples.len(),
            cfg.win
        )));
    }
    let bank = MelFilterbank::new(cfg);
    let mags = stft_magnitudes(&clip.samples, cfg);
    let frames = mags.len();
    let mut values = Vec::with_capacity(frames * cfg.n_mels);
    for frame in &mags {
        for w in &bank.weights {
            let e: f64 = w.iter().zip(frame).map(|(a, b)| a * b).sum();
            values.push((e + cfg.eps).ln() as f32);
        }
    }
    MelSpectrogram::new(Tensor::new(&[frames, cfg.n_mels], values)?)
}

/// Appends silent frames up to `target` frames.
///
/// Longer inputs are an error unless `truncate` is set.
pub fn pad_frames(m: &MelSpectrogram, target: usize, floor: f32, truncate: bool) -> Result<MelSpectrogram> {
    let (t, f) = (m.frames(), m.bins());
    if t > target && !truncate {
        return Err(Error::Shape(format!("spectrogram has {t} frames, more than the target {target}")));
    }
    let mut data = m.values.data()[..t.min(target) * f].to_vec();
    data.resize(target * f, floor);
    MelSpectrogram::new(Tensor::new(&[target, f], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, secs: f64) -> AudioClip {
        let n = (32000.0 * secs) as usize;
        AudioClip::new((0..n).map(|i| (2.0 * PI * freq * i as f64 / 32000.0).sin() as f32 * 0.5).collect(), 32000)
    }

    #[test]
    fn ten_seconds_give_one_thousand_frames() {
        let cfg = MelConfig::default();
        assert_eq!(cfg.frame_count(320_000), 1000);
        let silent = AudioClip::new(vec![0.0; 320_000], 32000);
        let m = log_mel(&silent, &cfg).unwrap();
        assert_eq!((m.frames(), m.bins()), (1000, 64));
        let floor = (1e-10f64).ln() as f32;
        assert!(m.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn pure_tone_peaks_at_the_nearest_filter() {
        let cfg = MelConfig::default();
        let bank = MelFilterbank::new(&cfg);
        let m = log_mel(&tone(1000.0, 0.5), &cfg).unwrap();
        let row = m.frame(m.frames() / 2);
        let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(argmax, bank.nearest(1000.0));
    }

    #[test]
    fn filter_centres_are_increasing_and_span_nyquist() {
        let bank = MelFilterbank::new(&MelConfig::default());
        assert!(bank.centers.windows(2).all(|w| w[0] < w[1]));
        assert!(*bank.centers.last().unwrap() < 16000.0);
        assert!(bank.weights.iter().all(|w| w.iter().any(|&v| v > 0.0)));
    }

    #[test]
    fn padding_behaviour() {
        let cfg = MelConfig::default();
        let floor = cfg.floor();
        let m = MelSpectrogram::new(Tensor::from_fn(&[1000, 64], |i| i as f32)).unwrap();
        let p = pad_frames(&m, 1024, floor, false).unwrap();
        assert_eq!(p.frames(), 1024);
        assert!(p.values.data()[1000 * 64..].iter().all(|&v| v == floor));
        assert_eq!(&p.values.data()[..1000 * 64], m.values.data());
        let full = pad_frames(&p, 1024, floor, false).unwrap();
        assert_eq!(full, p);
        let half = MelSpectrogram::new(Tensor::from_fn(&[512, 64], |i| i as f32)).unwrap();
        let p = pad_frames(&half, 1024, floor, false).unwrap();
        assert_eq!(&p.values.data()[..512 * 64], half.values.data());
        assert!(pad_frames(&p, 1000, floor, false).is_err());
        assert_eq!(pad_frames(&p, 1000, floor, true).unwrap().frames(), 1000);
    }

    #[test]
    fn short_clips_need_the_flag() {
        let mut cfg = MelConfig::default();
        let clip = AudioClip::new(vec![0.1; 500], 32000);
        assert!(log_mel(&clip, &cfg).is_err());
        cfg.allow_short = true;
        assert_eq!(log_mel(&clip, &cfg).unwrap().frames(), 1);
    }

    #[test]
    fn silence_prefix_only_changes_silent_frames() {
        let cfg = MelConfig::default();
        let t = tone(700.0, 1.0);
        // One second of silence, then the tone.
        let mut joined = vec![0.0f32; 32000];
        joined.extend_from_slice(&t.samples);
        let a = log_mel(&AudioClip::new(joined, 32000), &cfg).unwrap();
        let floor = cfg.floor();
        // Frames whose window lies fully inside the silence are exactly silent.
        for f in 0..(32000 - 512) / 320 {
            assert!(a.frame(f).iter().all(|&v| v == floor), "frame {f}");
        }
        // Frames fully inside the tone match the tone-only analysis.
        let b = log_mel(&t, &cfg).unwrap();
        for f in 2..b.frames() - 2 {
            let fa = a.frame(f + 100);
            let fb = b.frame(f);
            assert!(fa.iter().zip(fb).all(|(x, y)| (x - y).abs() < 1e-3), "frame {f}");
        }
    }
}
