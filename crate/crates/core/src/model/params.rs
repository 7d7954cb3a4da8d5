//! Parameter layout of the backbone.
//!
//! The layout is a flat, ordered list of named shapes. It is derived from the
//! configuration alone, so parameter counts never allocate weights.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::config::ModelConfig;
use crate::scan::{a_log_init, delta_bias_init};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-a, a)`
    Uniform(f64),
    /// `ln(n + 1)` along the state axis.
    ALog,
    /// Step-size bias, softplus log-uniform in `[1e-3, 1e-1]`.
    DeltaBias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Top-level group used in breakdowns: `patch_embed`, `stages.N` or `head`.
    pub fn group(&self) -> String {
        let mut parts = self.name.split('.');
        match parts.next() {
            Some("stages") => format!("stages.{}", parts.next().unwrap_or("")),
            Some(first) => first.to_string(),
            None => String::new(),
        }
    }

    fn materialize<T: Float, R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Uniform(a) => Tensor::uniform(&self.shape, -a, a, rng),
            Init::ALog => a_log_init(self.shape[0], self.shape[1]),
            Init::DeltaBias => delta_bias_init(self.shape[0], rng),
        }
    }
}

/// Name prefixes for the per-direction scan parameters.
pub const SCAN_FIELDS: [&str; 7] = ["a_log", "d_skip", "delta_down", "delta_up", "delta_bias", "b_proj", "c_proj"];

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.weight"), &[d], Init::Ones);
        self.add(format!("{prefix}.bias"), &[d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize, bias: bool) {
        self.add(format!("{prefix}.weight"), &[i, o], Init::Uniform(1.0 / (i as f64).sqrt()));
        if bias {
            self.add(format!("{prefix}.bias"), &[o], Init::Zeros);
        }
    }

    fn ffn(&mut self, prefix: &str, c: usize, ratio: usize) {
        self.linear(&format!("{prefix}.fc1"), c, ratio * c, true);
        self.linear(&format!("{prefix}.fc2"), ratio * c, c, true);
    }
}

/// Ordered parameter layout for `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs(Vec::new());
    let p = cfg.patch_size;
    let c0 = cfg.stages[0].dim;
    s.linear("patch_embed.proj", p * p, c0, true);
    s.norm("patch_embed.norm", c0);
    for (si, stage) in cfg.stages.iter().enumerate() {
        let c = stage.dim;
        if si > 0 {
            let prev = cfg.stages[si - 1].dim;
            s.norm(&format!("stages.{si}.merge.norm"), 4 * prev);
            s.linear(&format!("stages.{si}.merge.proj"), 4 * prev, c, false);
        }
        let di = cfg.expand * c;
        let (n, r, k) = (cfg.state_size, cfg.rank_for(c), cfg.conv_kernel);
        let dirs = if cfg.share_directions { 1 } else { 4 };
        for b in 0..stage.depth {
            let pre = format!("stages.{si}.blocks.{b}");
            s.norm(&format!("{pre}.ln1"), c);
            s.linear(&format!("{pre}.in_x"), c, di, false);
            s.linear(&format!("{pre}.in_gate"), c, di, false);
            s.add(format!("{pre}.conv.weight"), &[di, k, k], Init::Uniform(1.0 / k as f64));
            s.add(format!("{pre}.conv.bias"), &[di], Init::Zeros);
            for d in 0..dirs {
                let sp = format!("{pre}.ss2d.{d}");
                let lim_d = 1.0 / (di as f64).sqrt();
                s.add(format!("{sp}.a_log"), &[di, n], Init::ALog);
                s.add(format!("{sp}.d_skip"), &[di], Init::Ones);
                s.add(format!("{sp}.delta_down"), &[di, r], Init::Uniform(lim_d));
                s.add(format!("{sp}.delta_up"), &[r, di], Init::Uniform(1.0 / (r as f64).sqrt()));
                s.add(format!("{sp}.delta_bias"), &[di], Init::DeltaBias);
                s.add(format!("{sp}.b_proj"), &[di, n], Init::Uniform(lim_d));
                s.add(format!("{sp}.c_proj"), &[di, n], Init::Uniform(lim_d));
            }
            s.norm(&format!("{pre}.out_norm"), di);
            s.linear(&format!("{pre}.out_proj"), di, c, false);
            s.norm(&format!("{pre}.ln2"), c);
            s.ffn(&format!("{pre}.ffn"), c, cfg.mlp_ratio);
            if stage.with_transformer_interleave {
                let ap = format!("{pre}.attn");
                s.norm(&format!("{ap}.ln1"), c);
                for q in ["q", "k", "v", "proj"] {
                    s.linear(&format!("{ap}.{q}"), c, c, true);
                }
                s.norm(&format!("{ap}.ln2"), c);
                s.ffn(&format!("{ap}.ffn"), c, cfg.mlp_ratio);
            }
        }
    }
    let last = cfg.stages.last().expect("validated config has stages").dim;
    s.norm("head.norm", last);
    s.linear("head.fc", last, cfg.n_classes, true);
    s.0
}

/// Trainable scalars in a model built from `cfg`.
pub fn count_params(cfg: &ModelConfig) -> usize {
    param_specs(cfg).iter().map(ParamSpec::numel).sum()
}

/// Parameter counts per top-level group, in layout order.
pub fn param_breakdown(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for spec in param_specs(cfg) {
        let g = spec.group();
        match out.last_mut() {
            Some((name, n)) if *name == g => *n += spec.numel(),
            _ => out.push((g, spec.numel())),
        }
    }
    out
}

/// Closed-form size of one interleaved attention block of width `c`.
pub fn attention_block_params(c: usize, mlp_ratio: usize) -> usize {
    // Two norms, q/k/v/proj with bias, FFN with bias.
    4 * c + 4 * (c * c + c) + 2 * mlp_ratio * c * c + mlp_ratio * c + c
}

/// Named parameter tensors in layout order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Float = f32> {
    specs: Vec<ParamSpec>,
    index: HashMap<String, usize>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    /// Fresh initialization, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let specs = param_specs(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs.iter().map(|s| s.materialize(&mut rng)).collect();
        Self::from_parts(specs, tensors)
    }

    pub(crate) fn from_parts(specs: Vec<ParamSpec>, tensors: Vec<Tensor<T>>) -> Self {
        let index = specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        Self { specs, index, tensors }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore::from_parts(self.specs.clone(), self.tensors.iter().map(Tensor::cast).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let specs = param_specs(&ModelConfig::tiny().with_interleave(true));
        let mut names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn breakdown_sums_to_total() {
        for cfg in [ModelConfig::nano(), ModelConfig::micro(), ModelConfig::tiny()] {
            let total: usize = param_breakdown(&cfg).iter().map(|(_, n)| n).sum();
            assert_eq!(total, count_params(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let mut cfg = ModelConfig::nano();
        cfg.set("dims", "8,16").unwrap();
        cfg.set("depths", "1,1").unwrap();
        let a = ParamStore::<f32>::init(&cfg, 7);
        let b = ParamStore::<f32>::init(&cfg, 7);
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(a.numel(), count_params(&cfg));
        assert_ne!(ParamStore::<f32>::init(&cfg, 8).tensors, a.tensors);
    }

    #[test]
    fn attention_formula_matches_layout() {
        for c in [8, 32, 96] {
            let mut cfg = ModelConfig::nano();
            cfg.set("dims", &c.to_string()).unwrap();
            cfg.set("depths", "1").unwrap();
            cfg.stages[0].heads = 1;
            let plain = count_params(&cfg);
            let with = count_params(&cfg.clone().with_interleave(true));
            assert_eq!(with - plain, attention_block_params(c, 4));
            assert_eq!(attention_block_params(c, 4), 12 * c * c + 13 * c);
        }
    }
}
