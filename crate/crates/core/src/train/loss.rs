use crate::autodiff::{sigmoid, softplus, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Mean binary cross-entropy on logits, `max(z,0) - z*t + log(1 + e^-|z|)`.
///
/// Targets may be soft but must lie in `[0, 1]`.
pub fn bce_loss<'t, T: Float>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    let value = {
        let z = logits.value();
        if z.shape() != targets.shape() {
            return Err(Error::Shape(format!("bce_loss: logits {:?} vs targets {:?}", z.shape(), targets.shape())));
        }
        if let Some(bad) = targets.data().iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
            return Err(Error::Value(format!("bce_loss: target {bad} outside [0, 1]")));
        }
        let n = T::c(z.numel() as f64);
        let total: T = z.data().iter().zip(targets.data()).map(|(&z, &t)| softplus(-z.abs()) + z.max(T::zero()) - z * t).sum();
        Tensor::scalar(total / n)
    };
    let t = targets.data().to_vec();
    logits.tape().record(value, &[logits], move |args| {
        let z = args.inputs[0].data();
        let scale = args.grad[0] / T::c(z.len() as f64);
        vec![Some(z.iter().zip(&t).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect())]
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
    fn reference_points() {
        let tape = Tape::<f64>::new();
        let l = bce_loss(tape.var(Tensor::zeros(&[2, 2])), &Tensor::full(&[2, 2], 0.5)).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_loss(tape.var(Tensor::full(&[1], 20.0)), &Tensor::ones(&[1])).unwrap();
        assert!(l.item() > 0.0 && l.item() < 3e-9);
        let l = bce_loss(tape.var(Tensor::full(&[1], 800.0)), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(l.item(), 800.0);
    }

    #[test]
    fn matches_direct_formula() {
        let z = [0.3f64, -1.7, 2.2, -0.05, 4.0, -3.1];
        let t = [1.0, 0.0, 0.25, 0.9, 0.0, 1.0];
        let tape = Tape::new();
        let l = bce_loss(tape.var(Tensor::new(&[2, 3], z.to_vec()).unwrap()), &Tensor::new(&[2, 3], t.to_vec()).unwrap()).unwrap();
        let want: f64 = z
            .iter()
            .zip(&t)
            .map(|(&z, &t)| {
                let s = 1.0 / (1.0 + (-z).exp());
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!(((l.item() - want) / want).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_targets() {
        let tape = Tape::<f32>::new();
        let z = tape.var(Tensor::zeros(&[2]));
        assert!(matches!(bce_loss(z, &Tensor::new(&[2], vec![0.5, 1.5]).unwrap()), Err(Error::Value(_))));
        assert!(matches!(bce_loss(z, &Tensor::zeros(&[3])), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::<f64>::uniform(&[3, 4], 0.0, 1.0, &mut rng);
        let z = Tensor::<f64>::randn(&[3, 4], 2.0, &mut rng);
        let report = check_gradients(&[z], &GradCheckConfig::default(), |v| bce_loss(v[0], &t)).unwrap();
        assert!(report.passed());
    }
}
