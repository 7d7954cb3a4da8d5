use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Half-open rectangle `[t0, t1) x [f0, f1)` of spectrogram cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub t0: usize,
    pub t1: usize,
    pub f0: usize,
    pub f1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.t1 - self.t0) * (self.f1 - self.f0)
    }

    pub fn contains(&self, t: usize, f: usize) -> bool {
        (self.t0..self.t1).contains(&t) && (self.f0..self.f1).contains(&f)
    }

    /// Box of roughly `(1 - lambda) * T * F` cells centred at a random cell,
    /// clipped to the spectrogram.
    pub fn sample<R: Rng + ?Sized>(lambda: f64, frames: usize, bins: usize, rng: &mut R) -> Self {
        let r = (1.0 - lambda).clamp(0.0, 1.0).sqrt();
        let (ct, cf) = ((frames as f64 * r).round() as usize, (bins as f64 * r).round() as usize);
        let (mt, mf) = (rng.random_range(0..frames), rng.random_range(0..bins));
        let t0 = mt.saturating_sub(ct / 2);
        let f0 = mf.saturating_sub(cf / 2);
        Self { t0, t1: (mt + ct.div_ceil(2)).min(frames), f0, f1: (mf + cf.div_ceil(2)).min(bins) }
    }
}

#[derive(Clone, Debug)]
pub struct CutMixOutput {
    pub batch: Tensor<f32>,
    pub targets: Tensor<f32>,
    /// Fraction of cells kept from the original sample.
    pub lambda: f64,
    pub cut: CutBox,
    /// Donor of the pasted region for each sample.
    pub partner: Vec<usize>,
}

/// Pastes `cut` from `partner[i]` into sample `i`; targets mix with the
/// area-exact `lambda = 1 - area / (T * F)`.
pub fn cutmix_with(batch: &Tensor<f32>, targets: &Tensor<f32>, cut: CutBox, partner: &[usize]) -> Result<CutMixOutput> {
    let [b, t, f] = batch.dims3()?;
    let [tb, c] = targets.dims2()?;
    if tb != b || partner.len() != b {
        return Err(Error::Shape(format!("cutmix: batch {b}, targets {tb}, partners {}", partner.len())));
    }
    if cut.t1 > t || cut.f1 > f || cut.t0 > cut.t1 || cut.f0 > cut.f1 {
        return Err(Error::Shape(format!("cutmix: box {cut:?} outside {t}x{f}")));
    }
    let lambda = 1.0 - cut.area() as f64 / (t * f) as f64;
    let src = batch.data();
    let mut out = src.to_vec();
    for (i, &j) in partner.iter().enumerate() {
        for ti in cut.t0..cut.t1 {
            let (a, z) = ((i * t + ti) * f, (j * t + ti) * f);
            out[a + cut.f0..a + cut.f1].copy_from_slice(&src[z + cut.f0..z + cut.f1]);
        }
    }
    let y = targets.data();
    let mut mixed = vec![0.0f32; b * c];
    for (i, &j) in partner.iter().enumerate() {
        for k in 0..c {
            mixed[i * c + k] = (lambda * y[i * c + k] as f64 + (1.0 - lambda) * y[j * c + k] as f64) as f32;
        }
    }
    Ok(CutMixOutput {
        batch: Tensor::new(&[b, t, f], out)?,
        targets: Tensor::new(&[b, c], mixed)?,
        lambda,
        cut,
        partner: partner.to_vec(),
    })
}

/// CutMix on `[B, T, F]` spectrograms with `lambda ~ Beta(alpha, alpha)` and
/// a shuffled donor order.
pub fn cutmix<R: Rng + ?Sized>(batch: &Tensor<f32>, targets: &Tensor<f32>, alpha: f64, rng: &mut R) -> Result<CutMixOutput> {
    let [b, t, f] = batch.dims3()?;
    if b < 2 {
        return Err(Error::Value(format!("cutmix needs at least 2 samples, got {b}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("cutmix alpha {alpha}: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let cut = CutBox::sample(lambda, t, f, rng);
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(rng);
    cutmix_with(batch, targets, cut, &partner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs() -> (Tensor<f32>, Tensor<f32>) {
        let batch = Tensor::from_fn(&[3, 8, 5], |i| (i / 40) as f32 * 100.0 + (i % 40) as f32);
        let targets = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        (batch, targets)
    }

    #[test]
    fn empty_box_changes_nothing() {
        let (batch, targets) = inputs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cut = CutBox::sample(1.0, 8, 5, &mut rng);
        assert_eq!(cut.area(), 0);
        let out = cutmix_with(&batch, &targets, cut, &[2, 0, 1]).unwrap();
        assert_eq!(out.lambda, 1.0);
        assert_eq!(out.batch, batch);
        assert_eq!(out.targets, targets);
    }

    #[test]
    fn full_box_replaces_sample() {
        let (batch, targets) = inputs();
        let out = cutmix_with(&batch, &targets, CutBox { t0: 0, t1: 8, f0: 0, f1: 5 }, &[1, 2, 0]).unwrap();
        assert_eq!(out.lambda, 0.0);
        assert_eq!(&out.batch.data()[..40], &batch.data()[40..80]);
        assert_eq!(&out.targets.data()[..2], &[0.0, 1.0]);
    }

    #[test]
    fn pasted_fraction_is_exact() {
        let (batch, targets) = inputs();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let out = cutmix(&batch, &targets, 1.0, &mut rng).unwrap();
            for (i, &j) in out.partner.iter().enumerate() {
                let mut pasted = 0;
                for ti in 0..8 {
                    for fi in 0..5 {
                        let cell = out.batch.data()[(i * 8 + ti) * 5 + fi];
                        let inside = out.cut.contains(ti, fi);
                        let want = batch.data()[((if inside { j } else { i }) * 8 + ti) * 5 + fi];
                        assert_eq!(cell, want);
                        pasted += inside as usize;
                    }
                }
                assert!((pasted as f64 / 40.0 - (1.0 - out.lambda)).abs() < 1e-12);
                for k in 0..2 {
                    let want = out.lambda * targets.data()[i * 2 + k] as f64 + (1.0 - out.lambda) * targets.data()[j * 2 + k] as f64;
                    assert!((out.targets.data()[i * 2 + k] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn single_sample_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(cutmix(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 2]), 1.0, &mut rng).is_err());
    }
}
