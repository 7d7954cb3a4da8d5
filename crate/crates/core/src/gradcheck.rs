//! Finite-difference verification of tape adjoints (64-bit).
//!
//! For each input tensor the analytic gradient of a scalar function is
//! compared against the five-point stencil
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose O(h^4) truncation
//! allows a step large enough to keep round-off near 1e-12. The error
//! of a tensor is `max|analytic - numeric| / max(max|numeric|, max|analytic|, floor)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{MapLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ss_block_forward, Mode, Model, ModelConfig};
use crate::scan::{selective_scan_forward, ss2d_forward, ScanParams, ScanVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Stencil step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Coordinates probed per tensor; `0` probes every coordinate.
    pub max_probes: usize,
    /// Denominator floor for near-zero gradients.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-4, max_probes: 0, floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub probes: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.rel_err < self.tolerance && t.rel_err.is_finite())
    }

    pub fn probes(&self) -> usize {
        self.tensors.iter().map(|t| t.probes).sum()
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&vars)?;
    let v = out.value();
    if !v.is_scalar() {
        return Err(Error::Usage(format!("gradcheck function must return a scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Compares tape gradients of `f` with respect to every input against
/// central finite differences.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = f(&vars)?;
        tape.backward(loss)?;
        vars.iter().map(|v| v.grad().expect("leaf gradient after backward")).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut tensors = Vec::with_capacity(inputs.len());
    for (ti, grad) in analytic.iter().enumerate() {
        let n = inputs[ti].numel();
        let probes: Vec<usize> = if cfg.max_probes == 0 || n <= cfg.max_probes {
            (0..n).collect()
        } else {
            let mut p = sample(&mut rng, n, cfg.max_probes).into_vec();
            p.sort_unstable();
            p
        };
        let mut max_abs_err = 0.0f64;
        let mut max_num = 0.0f64;
        let mut max_ana = 0.0f64;
        for &i in &probes {
            let orig = work[ti].data()[i];
            let mut at = |k: f64| {
                work[ti].data_mut()[i] = orig + k * cfg.step;
                evaluate(&work, &f)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work[ti].data_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.step);
            let a = grad.data()[i];
            max_abs_err = max_abs_err.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_ana = max_ana.max(a.abs());
        }
        let rel_err = max_abs_err / max_num.max(max_ana).max(cfg.floor);
        tensors.push(TensorCheck { index: ti, probes: probes.len(), max_abs_err, rel_err });
    }
    Ok(GradCheckReport { tensors, tolerance: cfg.tolerance })
}

/// Named verification targets at toy shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    DwConv,
    LayerNorm,
    /// One selective scan, `L = 8, D = 2, N = 2`.
    Scan,
    /// Four-direction scan on a 3x4 map.
    Ss2d,
    /// A full SS block on a `[4, 4, 4]` map.
    Block,
    /// The two-stage toy backbone end to end.
    Model,
}

impl GradScope {
    pub const ALL: [GradScope; 6] =
        [GradScope::DwConv, GradScope::LayerNorm, GradScope::Scan, GradScope::Ss2d, GradScope::Block, GradScope::Model];

    pub fn name(self) -> &'static str {
        match self {
            GradScope::DwConv => "dwconv",
            GradScope::LayerNorm => "layer_norm",
            GradScope::Scan => "scan",
            GradScope::Ss2d => "ss2d",
            GradScope::Block => "block",
            GradScope::Model => "model",
        }
    }
}

impl std::str::FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck scope {s:?}")))
    }
}

fn scan_vars<'t>(v: &[Var<'t, f64>]) -> ScanVars<'t, f64> {
    ScanVars { a_log: v[0], d_skip: v[1], delta_down: v[2], delta_up: v[3], delta_bias: v[4], b_proj: v[5], c_proj: v[6] }
}

/// Small backbone for the block and model scopes.
fn scope_model(stages: usize) -> Result<Model<f64>> {
    let mut cfg = ModelConfig::toy(3);
    cfg.set("dims", if stages == 1 { "4" } else { "4,8" })?;
    cfg.set("depths", if stages == 1 { "1" } else { "1,1" })?;
    cfg.set("heads", if stages == 1 { "2" } else { "2,2" })?;
    cfg.frames = 32;
    cfg.n_mels = 8;
    cfg.state_size = 2;
    cfg.scan_chunk = 4;
    Model::new(cfg, 5)
}

/// Runs the finite-difference check for one scope. Large tensors are probed
/// at `probes` random coordinates (`0` probes everything).
pub fn check_scope(scope: GradScope, probes: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig { max_probes: probes, seed, ..Default::default() };
    let weights = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::<f64>::uniform(shape, -1.0, 1.0, rng);
    match scope {
        GradScope::DwConv => {
            let inputs = vec![weights(&[2, 5, 5], &mut rng), weights(&[2, 3, 3], &mut rng), weights(&[2], &mut rng), weights(&[2, 5, 5], &mut rng)];
            check_gradients(&inputs, &cfg, |v| v[0].depthwise_conv2d(&v[1], Some(&v[2]), MapLayout::Chw)?.mul(&v[3])?.sum())
        }
        GradScope::LayerNorm => {
            let inputs = vec![
                Tensor::uniform(&[3, 6], -2.0, 2.0, &mut rng),
                Tensor::uniform(&[6], 0.5, 1.5, &mut rng),
                weights(&[6], &mut rng),
                weights(&[3, 6], &mut rng),
            ];
            check_gradients(&inputs, &cfg, |v| v[0].layer_norm(&v[1], &v[2], 1e-5)?.mul(&v[3])?.sum())
        }
        GradScope::Scan => {
            let p = ScanParams::<f64>::init(2, 2, 1, &mut rng);
            let mut inputs: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
            inputs[4] = Tensor::new(&[2], vec![0.3, -0.2])?;
            inputs.push(weights(&[8, 2], &mut rng));
            inputs.push(weights(&[8, 2], &mut rng));
            check_gradients(&inputs, &cfg, |v| selective_scan_forward(&scan_vars(v), v[7], 3)?.mul(&v[8])?.sum())
        }
        GradScope::Ss2d => {
            let mut inputs = vec![weights(&[2, 3, 4], &mut rng)];
            for _ in 0..4 {
                inputs.extend(ScanParams::<f64>::init(2, 2, 1, &mut rng).tensors().into_iter().cloned());
            }
            inputs.push(weights(&[2, 3, 4], &mut rng));
            check_gradients(&inputs, &cfg, |v| {
                let vars: Vec<_> = (0..4).map(|k| scan_vars(&v[1 + 7 * k..])).collect();
                ss2d_forward(&vars, v[0], 4)?.mul(&v[29])?.sum()
            })
        }
        GradScope::Block => {
            let model = scope_model(1)?;
            let mut inputs = model.params.tensors.clone();
            inputs.push(Tensor::randn(&[4, 4, 4], 1.0, &mut rng));
            let w = weights(&[4, 4, 4], &mut rng);
            check_gradients(&inputs, &cfg, |v| {
                let (params, x) = v.split_at(v.len() - 1);
                ss_block_forward(&model, params, x[0])?.mul(&x[0].tape().constant(w.clone()))?.sum()
            })
        }
        GradScope::Model => {
            let model = scope_model(2)?;
            let mel = Tensor::randn(&[model.config.frames, model.config.n_mels], 1.0, &mut rng);
            let mut inputs = model.params.tensors.clone();
            inputs.push(model.input_grid(&mel)?);
            let w = weights(&[model.config.n_classes], &mut rng);
            check_gradients(&inputs, &cfg, |v| {
                let (params, grid) = v.split_at(v.len() - 1);
                let out = model.forward_grid(params, grid[0], &mut Mode::Eval)?;
                out.logits.mul(&grid[0].tape().constant(w.clone()))?.sum()
            })
        }
    }
}
