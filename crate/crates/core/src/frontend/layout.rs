//! Patch-window layout of a `T x F` spectrogram.
//!
//! The time axis is cut into `n` windows of `T / n` frames. Window `w`
//! becomes the band of rows `w*F .. (w+1)*F` of a `(n*F) x (T/n)` map, with
//! frequency along rows and time along columns. A row-major patch raster over
//! that map enumerates tokens time-fastest, then frequency, then window, and
//! patches sharing a time span but differing in frequency are vertical
//! neighbours.

use crate::error::{Error, Result};
use crate::frontend::mel::MelSpectrogram;
use crate::tensor::{Float, Tensor};

/// `[T, F]` to `[n*F, T/n]`.
pub fn window_reshape<T: Float>(m: &Tensor<T>, n_windows: usize) -> Result<Tensor<T>> {
    let [t, f] = m.dims2()?;
    if n_windows == 0 || t % n_windows != 0 {
        return Err(Error::Shape(format!("{t} frames cannot be split into {n_windows} equal windows")));
    }
    let tw = t / n_windows;
    let mut out = vec![T::zero(); t * f];
    for w in 0..n_windows {
        for fi in 0..f {
            for ti in 0..tw {
                out[(w * f + fi) * tw + ti] = m.data()[(w * tw + ti) * f + fi];
            }
        }
    }
    Tensor::new(&[n_windows * f, tw], out)
}

/// Inverse of [`window_reshape`].
pub fn inverse_window_reshape<T: Float>(grid: &Tensor<T>, n_windows: usize) -> Result<Tensor<T>> {
    let [rows, tw] = grid.dims2()?;
    if n_windows == 0 || rows % n_windows != 0 {
        return Err(Error::Shape(format!("{rows} rows cannot hold {n_windows} windows")));
    }
    let f = rows / n_windows;
    let t = tw * n_windows;
    let mut out = vec![T::zero(); t * f];
    for w in 0..n_windows {
        for fi in 0..f {
            for ti in 0..tw {
                out[(w * tw + ti) * f + fi] = grid.data()[(w * f + fi) * tw + ti];
            }
        }
    }
    Tensor::new(&[t, f], out)
}

/// Source position of a patch token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSource {
    pub window: usize,
    /// First frame covered, in spectrogram time.
    pub time: usize,
    /// First mel bin covered.
    pub freq: usize,
}

/// Spectrogram origin of each `patch x patch` token in raster order.
pub fn token_sources(frames: usize, bins: usize, n_windows: usize, patch: usize) -> Result<Vec<TokenSource>> {
    if n_windows == 0 || frames % n_windows != 0 {
        return Err(Error::Shape(format!("{frames} frames cannot be split into {n_windows} windows")));
    }
    let tw = frames / n_windows;
    let rows = n_windows * bins;
    if patch == 0 || rows % patch != 0 || tw % patch != 0 {
        return Err(Error::Shape(format!("{rows}x{tw} map is not divisible into {patch}x{patch} patches")));
    }
    let mut out = Vec::with_capacity((rows / patch) * (tw / patch));
    for pr in 0..rows / patch {
        for pc in 0..tw / patch {
            let row = pr * patch;
            let window = row / bins;
            out.push(TokenSource { window, time: window * tw + pc * patch, freq: row % bins });
        }
    }
    Ok(out)
}

/// Patch embeddings laid out on the 2D window grid, `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub grid: Tensor<f32>,
    pub window_count: usize,
    pub patch_size: usize,
}

impl TokenGrid {
    pub fn token_count(&self) -> usize {
        let s = self.grid.shape();
        s[1] * s[2]
    }
}

/// Convenience wrapper for a spectrogram.
pub fn spectrogram_grid(m: &MelSpectrogram, n_windows: usize) -> Result<Tensor<f32>> {
    window_reshape(&m.values, n_windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_input_becomes_square() {
        let m = Tensor::<f32>::from_fn(&[1024, 64], |i| i as f32);
        let g = window_reshape(&m, 4).unwrap();
        assert_eq!(g.shape(), &[256, 256]);
        assert_eq!(inverse_window_reshape(&g, 4).unwrap(), m);
    }

    #[test]
    fn single_window_is_a_transpose() {
        let m = Tensor::<f32>::from_fn(&[6, 3], |i| i as f32);
        assert_eq!(window_reshape(&m, 1).unwrap(), m.transpose2().unwrap());
    }

    #[test]
    fn indivisible_windows_are_rejected() {
        let m = Tensor::<f32>::zeros(&[10, 3]);
        assert!(matches!(window_reshape(&m, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn toy_token_order() {
        // T=4, F=2, two windows, 1x1 patches: map is 4x2.
        let order: Vec<(usize, usize)> = token_sources(4, 2, 2, 1).unwrap().iter().map(|s| (s.time, s.freq)).collect();
        assert_eq!(order, vec![(0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (3, 0), (2, 1), (3, 1)]);
    }

    proptest! {
        #[test]
        fn window_reshape_round_trips(t_per in 1usize..6, n in 1usize..5, f in 1usize..6, seed in 0u64..1000) {
            let t = t_per * n;
            let m = Tensor::<f32>::from_fn(&[t, f], |i| ((i as u64 * 2654435761 + seed) % 1000) as f32 * 0.37);
            let g = window_reshape(&m, n).unwrap();
            prop_assert_eq!(g.shape(), &[n * f, t_per]);
            prop_assert_eq!(inverse_window_reshape(&g, n).unwrap(), m);
        }
    }
}
