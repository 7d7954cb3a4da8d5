//! Multi-head scaled dot-product attention as a single tape operation.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Float, Tensor};

fn head_slice<T: Float>(x: &[T], l: usize, c: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(l * dh);
    for i in 0..l {
        out.extend_from_slice(&x[i * c + h * dh..i * c + (h + 1) * dh]);
    }
    out
}

fn scatter_head<T: Float>(dst: &mut [T], src: &[T], l: usize, c: usize, h: usize, dh: usize) {
    for i in 0..l {
        dst[i * c + h * dh..i * c + (h + 1) * dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
    }
}

/// Row-softmax of `q k^T / sqrt(dh)` for one head, `[L, L]`.
fn probs<T: Float>(q: &[T], k: &[T], l: usize, dh: usize) -> Vec<T> {
    let scale = T::one() / T::c(dh as f64).sqrt();
    let mut s = matmul_nt(q, k, l, dh, l);
    for row in s.chunks_mut(l) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) * scale).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / z);
    }
    s
}

fn check<T: Float>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Result<(usize, usize)> {
    let [l, c] = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Shape(format!("attention: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape())));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("attention: width {c} not divisible by {heads} heads")));
    }
    Ok((l, c))
}

/// Attention probabilities of every head for `q, k: [L, C]`.
pub fn attention_weights<T: Float>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Vec<Tensor<T>>> {
    let (l, c) = check(q, k, k, heads)?;
    let dh = c / heads;
    (0..heads)
        .map(|h| {
            let p = probs(&head_slice(q.data(), l, c, h, dh), &head_slice(k.data(), l, c, h, dh), l, dh);
            Tensor::new(&[l, l], p)
        })
        .collect()
}

/// `softmax(q k^T / sqrt(dh)) v` per head over `[L, C]` inputs.
///
/// Probabilities are recomputed in the adjoint instead of stored.
pub fn multi_head_attention<'t, T: Float>(q: Var<'t, T>, k: Var<'t, T>, v: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let (value, l, c) = {
        let (qt, kt, vt) = (q.value(), k.value(), v.value());
        let (l, c) = check(&qt, &kt, &vt, heads)?;
        let dh = c / heads;
        let mut out = vec![T::zero(); l * c];
        for h in 0..heads {
            let p = probs(&head_slice(qt.data(), l, c, h, dh), &head_slice(kt.data(), l, c, h, dh), l, dh);
            let o = matmul_raw(&p, &head_slice(vt.data(), l, c, h, dh), l, l, dh);
            scatter_head(&mut out, &o, l, c, h, dh);
        }
        (Tensor::new(&[l, c], out)?, l, c)
    };
    q.tape().record(value, &[q, k, v], move |args| {
        let dh = c / heads;
        let scale = T::one() / T::c(dh as f64).sqrt();
        let (mut gq, mut gk, mut gv) = (vec![T::zero(); l * c], vec![T::zero(); l * c], vec![T::zero(); l * c]);
        for h in 0..heads {
            let qh = head_slice(args.inputs[0].data(), l, c, h, dh);
            let kh = head_slice(args.inputs[1].data(), l, c, h, dh);
            let vh = head_slice(args.inputs[2].data(), l, c, h, dh);
            let go = head_slice(args.grad, l, c, h, dh);
            let p = probs(&qh, &kh, l, dh);
            scatter_head(&mut gv, &matmul_tn(&p, &go, l, l, dh), l, c, h, dh);
            let mut ds = matmul_nt(&go, &vh, l, dh, l);
            for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            scatter_head(&mut gq, &matmul_raw(&ds, &kh, l, l, dh), l, c, h, dh);
            scatter_head(&mut gk, &matmul_tn(&ds, &qh, l, l, dh), l, c, h, dh);
        }
        vec![args.wants[0].then_some(gq), args.wants[1].then_some(gk), args.wants[2].then_some(gv)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f32>::randn(&[7, 8], 2.0, &mut rng);
        let k = Tensor::<f32>::randn(&[7, 8], 2.0, &mut rng);
        for p in attention_weights(&q, &k, 2).unwrap() {
            for row in p.data().chunks(7) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let tape = Tape::<f64>::new();
        let q = tape.var(Tensor::new(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let k = tape.var(Tensor::new(&[1, 4], vec![0.3, 0.1, -0.7, 2.0]).unwrap());
        let v = tape.var(Tensor::new(&[1, 4], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let o = multi_head_attention(q, k, v, 2).unwrap();
        assert_eq!(o.to_tensor().data(), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (l, c) = (5, 6);
        let q = Tensor::<f64>::randn(&[l, c], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[l, c], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[l, c], 1.0, &mut rng);
        let tape = Tape::new();
        let o = multi_head_attention(tape.var(q.clone()), tape.var(k.clone()), tape.var(v.clone()), 3).unwrap().to_tensor();
        let dh = 2;
        for h in 0..3 {
            for i in 0..l {
                let s: Vec<f64> = (0..l)
                    .map(|j| (0..dh).map(|d| q.data()[i * c + h * dh + d] * k.data()[j * c + h * dh + d]).sum::<f64>() / 2f64.sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for d in 0..dh {
                    let want: f64 = (0..l).map(|j| s[j].exp() / z * v.data()[j * c + h * dh + d]).sum();
                    assert!((o.data()[i * c + h * dh + d] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[4, 6], 1.0, &mut rng)).collect();
        let report = check_gradients(&inputs, &GradCheckConfig::default(), |x| {
            multi_head_attention(x[0], x[1], x[2], 2)?.mul(&x[3])?.sum()
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn bad_head_count_is_a_config_error() {
        let tape = Tape::<f32>::new();
        let x = tape.var(Tensor::zeros(&[2, 6]));
        assert!(matches!(multi_head_attention(x, x, x, 4), Err(Error::Config(_))));
    }
}
