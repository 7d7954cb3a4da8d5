//! Forward pass of the hierarchical backbone.
//!
//! Feature maps travel as token rows `[H*W, C]` in raster order. Public
//! block entry points that take `[C, H, W]` convert at the boundary.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{MapLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::frontend::window_reshape;
use crate::model::attention::multi_head_attention;
use crate::model::config::ModelConfig;
use crate::model::params::{ParamStore, SCAN_FIELDS};
use crate::scan::{ss2d_tokens, CrossScanPlan, ScanVars};
use crate::tensor::{Float, Tensor};

/// Training-time behaviour of a forward pass.
#[derive(Debug)]
pub enum Mode {
    Eval,
    /// Stochastic depth active, drawn from the given generator.
    Train(ChaCha8Rng),
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Mode::Train(ChaCha8Rng::seed_from_u64(seed))
    }

    /// `None` drops the branch; otherwise the branch scale.
    fn keep(&mut self, rate: f64) -> Option<f64> {
        match self {
            Mode::Train(rng) if rate > 0.0 => (rng.random::<f64>() >= rate).then(|| 1.0 / (1.0 - rate)),
            _ => Some(1.0),
        }
    }
}

/// Bound parameters: a model's tensors as tape variables.
pub struct Params<'a, 't, T: Float> {
    store: &'a ParamStore<T>,
    vars: &'a [Var<'t, T>],
}

impl<'a, 't, T: Float> Params<'a, 't, T> {
    pub fn new(store: &'a ParamStore<T>, vars: &'a [Var<'t, T>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Shape(format!("{} variables bound for {} parameters", vars.len(), store.len())));
        }
        Ok(Self { store, vars })
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.store.index_of(name).map(|i| self.vars[i]).ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    fn opt(&self, name: &str) -> Option<Var<'t, T>> {
        self.store.index_of(name).map(|i| self.vars[i])
    }

    fn norm(&self, x: Var<'t, T>, prefix: &str, eps: f64) -> Result<Var<'t, T>> {
        x.layer_norm(&self.get(&format!("{prefix}.weight"))?, &self.get(&format!("{prefix}.bias"))?, eps)
    }

    fn linear(&self, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
        x.linear(&self.get(&format!("{prefix}.weight"))?, self.opt(&format!("{prefix}.bias")).as_ref())
    }

    fn scan_vars(&self, prefix: &str) -> Result<ScanVars<'t, T>> {
        let [a_log, d_skip, delta_down, delta_up, delta_bias, b_proj, c_proj] =
            SCAN_FIELDS.map(|f| self.get(&format!("{prefix}.{f}")));
        Ok(ScanVars {
            a_log: a_log?,
            d_skip: d_skip?,
            delta_down: delta_down?,
            delta_up: delta_up?,
            delta_bias: delta_bias?,
            b_proj: b_proj?,
            c_proj: c_proj?,
        })
    }
}

fn residual<'t, T: Float>(x: Var<'t, T>, branch: impl FnOnce() -> Result<Var<'t, T>>, keep: Option<f64>) -> Result<Var<'t, T>> {
    match keep {
        None => Ok(x),
        Some(s) if s == 1.0 => x.add(&branch()?),
        Some(s) => x.add(&branch()?.scale(T::c(s))?),
    }
}

fn ffn<'t, T: Float>(p: &Params<'_, 't, T>, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let h = p.linear(x, &format!("{prefix}.fc1"))?.gelu()?;
    p.linear(h, &format!("{prefix}.fc2"))
}

/// Geometry shared by every block of a stage.
struct StageCtx<'c> {
    cfg: &'c ModelConfig,
    h: usize,
    w: usize,
    plan: CrossScanPlan,
}

/// SS block on token rows `[H*W, C]`.
fn ss_block<'t, T: Float>(
    p: &Params<'_, 't, T>,
    ctx: &StageCtx<'_>,
    x: Var<'t, T>,
    prefix: &str,
    drop: f64,
    mode: &mut Mode,
) -> Result<Var<'t, T>> {
    let eps = ctx.cfg.ln_eps;
    let dirs = if ctx.cfg.share_directions { 1 } else { 4 };
    let scans: Vec<ScanVars<'t, T>> =
        (0..dirs).map(|d| p.scan_vars(&format!("{prefix}.ss2d.{d}"))).collect::<Result<_>>()?;
    let keep = mode.keep(drop);
    let x = residual(
        x,
        || {
            let h = p.norm(x, &format!("{prefix}.ln1"), eps)?;
            let a = p.linear(h, &format!("{prefix}.in_x"))?;
            let di = a.shape()[1];
            let a = a
                .reshape(&[ctx.h, ctx.w, di])?
                .depthwise_conv2d(&p.get(&format!("{prefix}.conv.weight"))?, Some(&p.get(&format!("{prefix}.conv.bias"))?), MapLayout::Hwc)?
                .reshape(&[ctx.h * ctx.w, di])?
                .silu()?;
            let a = ss2d_tokens(&scans, a, &ctx.plan, ctx.cfg.scan_chunk)?;
            let a = p.norm(a, &format!("{prefix}.out_norm"), eps)?;
            let gate = p.linear(h, &format!("{prefix}.in_gate"))?.silu()?;
            p.linear(a.mul(&gate)?, &format!("{prefix}.out_proj"))
        },
        keep,
    )?;
    let keep = mode.keep(drop);
    residual(x, || ffn(p, p.norm(x, &format!("{prefix}.ln2"), eps)?, &format!("{prefix}.ffn")), keep)
}

/// Pre-norm attention block on token rows.
fn attention_block<'t, T: Float>(
    p: &Params<'_, 't, T>,
    eps: f64,
    heads: usize,
    x: Var<'t, T>,
    prefix: &str,
    drop: f64,
    mode: &mut Mode,
) -> Result<Var<'t, T>> {
    let keep = mode.keep(drop);
    let x = residual(
        x,
        || {
            let h = p.norm(x, &format!("{prefix}.ln1"), eps)?;
            let q = p.linear(h, &format!("{prefix}.q"))?;
            let k = p.linear(h, &format!("{prefix}.k"))?;
            let v = p.linear(h, &format!("{prefix}.v"))?;
            p.linear(multi_head_attention(q, k, v, heads)?, &format!("{prefix}.proj"))
        },
        keep,
    )?;
    let keep = mode.keep(drop);
    residual(x, || ffn(p, p.norm(x, &format!("{prefix}.ln2"), eps)?, &format!("{prefix}.ffn")), keep)
}

/// Flattened-index table cutting a `[H, W]` grid into `P x P` patch rows.
pub fn patch_indices(h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("{h}x{w} grid is not divisible into {p}x{p} patches")));
    }
    let mut idx = Vec::with_capacity(h * w);
    for pr in 0..h / p {
        for pc in 0..w / p {
            for i in 0..p {
                for j in 0..p {
                    idx.push((pr * p + i) * w + pc * p + j);
                }
            }
        }
    }
    Ok(idx)
}

/// Index table concatenating each 2x2 neighbourhood of `[H*W, C]` rows
/// into one `4C` row, in the order (0,0), (1,0), (0,1), (1,1).
pub fn merge_indices(h: usize, w: usize, c: usize) -> Result<Vec<usize>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("patch merge needs even extents, got {h}x{w}")));
    }
    let mut idx = Vec::with_capacity(h * w * c);
    for r in 0..h / 2 {
        for col in 0..w / 2 {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = (2 * r + dr) * w + 2 * col + dc;
                idx.extend((0..c).map(|ch| src * c + ch));
            }
        }
    }
    Ok(idx)
}

fn patch_merge<'t, T: Float>(p: &Params<'_, 't, T>, x: Var<'t, T>, h: usize, w: usize, prefix: &str, eps: f64) -> Result<Var<'t, T>> {
    let c = x.shape()[1];
    let idx = merge_indices(h, w, c)?;
    let m = x.gather(Arc::new(idx), &[(h / 2) * (w / 2), 4 * c])?;
    p.linear(p.norm(m, &format!("{prefix}.norm"), eps)?, &format!("{prefix}.proj"))
}

/// Logits and the spatial extent `(H, W)` seen by each stage.
#[derive(Debug)]
pub struct ForwardOutput<'t, T: Float> {
    pub logits: Var<'t, T>,
    pub extents: Vec<(usize, usize)>,
}

/// Backbone weights plus configuration.
#[derive(Clone, Debug)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config, seed);
        Ok(Self { config, params })
    }

    /// Every parameter as a trainable leaf tagged with its index.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.tensors.iter().enumerate().map(|(i, t)| tape.param(t.clone(), i)).collect()
    }

    /// Every parameter as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Checks a `[frames, mels]` spectrogram against the configured size.
    pub fn check_input(&self, mel: &Tensor<T>) -> Result<()> {
        let want = [self.config.frames, self.config.n_mels];
        if mel.shape() != want {
            return Err(Error::Shape(format!(
                "spectrogram is {:?}; expected padded ({}, {})",
                mel.shape(),
                want[0],
                want[1]
            )));
        }
        Ok(())
    }

    /// Window-reshaped input grid `[n*F, T/n]` for a spectrogram.
    pub fn input_grid(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(mel)?;
        window_reshape(mel, self.config.n_windows)
    }

    /// Full classification forward from a `[frames, mels]` spectrogram.
    pub fn forward<'t>(&self, vars: &[Var<'t, T>], mel: &Tensor<T>, mode: &mut Mode) -> Result<ForwardOutput<'t, T>> {
        let tape = vars.first().ok_or_else(|| Error::Usage("model has no parameters bound".into()))?.tape();
        let grid = tape.constant(self.input_grid(mel)?);
        self.forward_grid(vars, grid, mode)
    }

    /// Forward from an already reshaped `[H, W]` grid.
    pub fn forward_grid<'t>(&self, vars: &[Var<'t, T>], grid: Var<'t, T>, mode: &mut Mode) -> Result<ForwardOutput<'t, T>> {
        let cfg = &self.config;
        let p = Params::new(&self.params, vars)?;
        let shape = grid.shape();
        let (gh, gw) = match shape[..] {
            [h, w] => (h, w),
            _ => return Err(Error::Shape(format!("input grid must be 2D, got {shape:?}"))),
        };
        let ps = cfg.patch_size;
        let idx = patch_indices(gh, gw, ps)?;
        let (mut h, mut w) = (gh / ps, gw / ps);
        let tokens = grid.gather(Arc::new(idx), &[h * w, ps * ps])?;
        let mut x = p.norm(p.linear(tokens, "patch_embed.proj")?, "patch_embed.norm", cfg.ln_eps)?;

        let total = cfg.total_depth();
        let mut block = 0usize;
        let mut extents = Vec::with_capacity(cfg.stages.len());
        for (si, stage) in cfg.stages.iter().enumerate() {
            if si > 0 {
                x = patch_merge(&p, x, h, w, &format!("stages.{si}.merge"), cfg.ln_eps)?;
                h /= 2;
                w /= 2;
            }
            extents.push((h, w));
            let ctx = StageCtx { cfg, h, w, plan: CrossScanPlan::new(h, w) };
            for b in 0..stage.depth {
                let drop = if total > 1 { cfg.drop_path * block as f64 / (total - 1) as f64 } else { 0.0 };
                let prefix = format!("stages.{si}.blocks.{b}");
                x = ss_block(&p, &ctx, x, &prefix, drop, mode)?;
                if stage.with_transformer_interleave {
                    x = attention_block(&p, cfg.ln_eps, stage.heads, x, &format!("{prefix}.attn"), drop, mode)?;
                }
                block += 1;
            }
        }
        let pooled = p.norm(x, "head.norm", cfg.ln_eps)?.mean_rows()?;
        let logits = p.linear(pooled.reshape(&[1, pooled.shape()[0]])?, "head.fc")?;
        let n = cfg.n_classes;
        Ok(ForwardOutput { logits: logits.reshape(&[n])?, extents })
    }

    /// Evaluation-mode logits without gradients.
    pub fn predict(&self, mel: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.bind_frozen(&tape);
        Ok(self.forward(&vars, mel, &mut Mode::Eval)?.logits.to_tensor())
    }
}

/// Standalone SS block over a `[C, H, W]` map, parameters taken from
/// `stages.0.blocks.0` of `model`.
pub fn ss_block_forward<'t, T: Float>(model: &Model<T>, vars: &[Var<'t, T>], f: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = f.shape();
    let [c, h, w] = match shape[..] {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::Shape(format!("ss_block_forward expects [C, H, W], got {shape:?}"))),
    };
    let p = Params::new(&model.params, vars)?;
    let ctx = StageCtx { cfg: &model.config, h, w, plan: CrossScanPlan::new(h, w) };
    let x = f.reshape(&[c, h * w])?.transpose()?;
    let y = ss_block(&p, &ctx, x, "stages.0.blocks.0", 0.0, &mut Mode::Eval)?;
    y.transpose()?.reshape(&[c, h, w])
}

/// Standalone attention block over a `[C, H, W]` map, parameters from
/// `stages.0.blocks.0.attn`.
pub fn transformer_block_forward<'t, T: Float>(model: &Model<T>, vars: &[Var<'t, T>], f: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = f.shape();
    let [c, h, w] = match shape[..] {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::Shape(format!("transformer_block_forward expects [C, H, W], got {shape:?}"))),
    };
    let stage = &model.config.stages[0];
    if !stage.with_transformer_interleave {
        return Err(Error::Config("transformer block requested but interleave is disabled".into()));
    }
    let p = Params::new(&model.params, vars)?;
    let x = f.reshape(&[c, h * w])?.transpose()?;
    let y = attention_block(&p, model.config.ln_eps, stage.heads, x, "stages.0.blocks.0.attn", 0.0, &mut Mode::Eval)?;
    y.transpose()?.reshape(&[c, h, w])
}

/// Patch embedding of a `[1, H, W]` grid to `[d0, H/P, W/P]`.
pub fn patch_embed<'t, T: Float>(model: &Model<T>, vars: &[Var<'t, T>], grid: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = grid.shape();
    let (h, w) = match shape[..] {
        [1, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("patch_embed expects [1, H, W], got {shape:?}"))),
    };
    let p = Params::new(&model.params, vars)?;
    let ps = model.config.patch_size;
    let idx = patch_indices(h, w, ps)?;
    let tokens = grid.gather(Arc::new(idx), &[(h / ps) * (w / ps), ps * ps])?;
    let x = p.norm(p.linear(tokens, "patch_embed.proj")?, "patch_embed.norm", model.config.ln_eps)?;
    let c = x.shape()[1];
    x.transpose()?.reshape(&[c, h / ps, w / ps])
}

/// Patch merge of a `[C, H, W]` map into stage 1's width, `[2C, H/2, W/2]`.
pub fn patch_merge_forward<'t, T: Float>(model: &Model<T>, vars: &[Var<'t, T>], f: Var<'t, T>) -> Result<Var<'t, T>> {
    let shape = f.shape();
    let [c, h, w] = match shape[..] {
        [c, h, w] => [c, h, w],
        _ => return Err(Error::Shape(format!("patch_merge expects [C, H, W], got {shape:?}"))),
    };
    let p = Params::new(&model.params, vars)?;
    let x = f.reshape(&[c, h * w])?.transpose()?;
    let y = patch_merge(&p, x, h, w, "stages.1.merge", model.config.ln_eps)?;
    let c2 = y.shape()[1];
    y.transpose()?.reshape(&[c2, h / 2, w / 2])
}
