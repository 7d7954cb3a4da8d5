use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frontend::wav::AudioClip;

/// Interpolation kernel for [`resample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResampleMethod {
    #[default]
    Linear,
    /// Hann-windowed sinc with `half_width` zero crossings per side.
    WindowedSinc { half_width: usize },
}

impl fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResampleMethod::Linear => f.write_str("linear"),
            ResampleMethod::WindowedSinc { half_width } => write!(f, "sinc:{half_width}"),
        }
    }
}

/// `linear` or `sinc:N`.
impl FromStr for ResampleMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(ResampleMethod::Linear),
            other => other
                .strip_prefix("sinc:")
                .and_then(|n| n.parse().ok())
                .map(|half_width| ResampleMethod::WindowedSinc { half_width })
                .ok_or_else(|| Error::Config(format!("unknown resample method {other:?}"))),
        }
    }
}

/// Resamples to `target` Hz. The output has `round(n * target / source)` samples.
pub fn resample(clip: &AudioClip, target: u32, method: ResampleMethod) -> AudioClip {
    if clip.sample_rate == target || clip.samples.is_empty() {
        return AudioClip::new(clip.samples.clone(), target);
    }
    let ratio = clip.sample_rate as f64 / target as f64;
    let n_out = ((clip.samples.len() as f64) / ratio).round().max(1.0) as usize;
    let src = &clip.samples;
    let samples = match method {
        ResampleMethod::Linear => (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(src.len() - 1);
                let i1 = (i0 + 1).min(src.len() - 1);
                let frac = pos - i0 as f64;
                (src[i0] as f64 * (1.0 - frac) + src[i1] as f64 * frac) as f32
            })
            .collect(),
        ResampleMethod::WindowedSinc { half_width } => {
            // Low-pass at the lower of the two Nyquist rates.
            let cutoff = (1.0 / ratio).min(1.0);
            let reach = (half_width.max(1) as f64 / cutoff).ceil() as isize;
            (0..n_out)
                .map(|i| {
                    let pos = i as f64 * ratio;
                    let centre = pos.floor() as isize;
                    let mut acc = 0.0;
                    let mut norm = 0.0;
                    for k in (centre - reach + 1)..=(centre + reach) {
                        let t = pos - k as f64;
                        let x = t * cutoff;
                        let window_arg = t / (reach as f64);
                        if window_arg.abs() >= 1.0 {
                            continue;
                        }
                        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
                        let w = sinc * 0.5 * (1.0 + (PI * window_arg).cos());
                        let idx = k.clamp(0, src.len() as isize - 1) as usize;
                        acc += w * src[idx] as f64;
                        norm += w;
                    }
                    (acc / norm) as f32
                })
                .collect()
        }
    };
    AudioClip::new(samples, target)
}
