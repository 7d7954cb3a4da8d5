use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Micro,
    Nano,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tiny, Variant::Micro, Variant::Nano];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Micro => "micro",
            Variant::Nano => "nano",
        }
    }

    /// Stage dims, depths and attention heads.
    ///
    /// Depths of micro and nano are raised above the 2/2/6/2 and 2/2/4/2
    /// starting points so the totals land near the published budgets.
    fn schedule(self) -> ([usize; 4], [usize; 4], [usize; 4]) {
        match self {
            Variant::Tiny => ([96, 192, 384, 768], [2, 2, 9, 2], [3, 6, 12, 24]),
            Variant::Micro => ([48, 96, 192, 384], [2, 2, 9, 2], [3, 6, 12, 24]),
            Variant::Nano => ([32, 64, 128, 256], [2, 2, 8, 2], [2, 4, 8, 16]),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "micro" => Ok(Variant::Micro),
            "nano" => Ok(Variant::Nano),
            _ => Err(Error::Config(format!("unknown variant {s:?} (expected tiny, micro or nano)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub with_transformer_interleave: bool,
    pub heads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub patch_size: usize,
    pub n_windows: usize,
    /// Expected spectrogram frames after padding.
    pub frames: usize,
    pub n_mels: usize,
    pub stages: Vec<StageConfig>,
    pub state_size: usize,
    pub expand: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
    /// Rank of the step-size projection; `0` means `ceil(dim / 16)`.
    pub dt_rank: usize,
    /// One parameter set shared by all four scan directions.
    pub share_directions: bool,
    /// Largest stochastic-depth rate, reached by the last block.
    pub drop_path: f64,
    pub n_classes: usize,
    pub scan_chunk: usize,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let mut c = Self {
            variant: v,
            patch_size: 4,
            n_windows: 4,
            frames: 1024,
            n_mels: 64,
            stages: Vec::new(),
            state_size: 16,
            expand: 2,
            mlp_ratio: 4,
            conv_kernel: 3,
            dt_rank: 0,
            share_directions: false,
            drop_path: 0.1,
            n_classes: 527,
            scan_chunk: 64,
            ln_eps: 1e-5,
        };
        c.apply_schedule(v);
        c
    }

    pub fn tiny() -> Self {
        Self::variant(Variant::Tiny)
    }

    pub fn micro() -> Self {
        Self::variant(Variant::Micro)
    }

    pub fn nano() -> Self {
        Self::variant(Variant::Nano)
    }

    /// Two-stage nano-family model on a 32x32 grid (64 frames, 16 mels,
    /// two windows), small enough to train in seconds.
    pub fn toy(n_classes: usize) -> Self {
        let mut c = Self::nano();
        c.stages.truncate(2);
        c.stages[0].dim = 16;
        c.stages[1].dim = 32;
        c.stages.iter_mut().for_each(|s| s.depth = 1);
        c.frames = 64;
        c.n_mels = 16;
        c.n_windows = 2;
        c.state_size = 8;
        c.drop_path = 0.0;
        c.n_classes = n_classes;
        c.scan_chunk = 16;
        c
    }

    fn apply_schedule(&mut self, v: Variant) {
        let (dims, depths, heads) = v.schedule();
        self.variant = v;
        self.stages = (0..4)
            .map(|i| StageConfig { depth: depths[i], dim: dims[i], with_transformer_interleave: false, heads: heads[i] })
            .collect();
    }

    /// Enables or disables the attention block after every SS block.
    pub fn with_interleave(mut self, on: bool) -> Self {
        self.stages.iter_mut().for_each(|s| s.with_transformer_interleave = on);
        self
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    pub fn total_depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn rank_for(&self, dim: usize) -> usize {
        if self.dt_rank == 0 {
            dim.div_ceil(16)
        } else {
            self.dt_rank
        }
    }

    /// Side lengths `(H, W)` of the window-reshaped input grid.
    pub fn grid_size(&self) -> (usize, usize) {
        (self.n_windows * self.n_mels, self.frames / self.n_windows.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() || self.stages.len() > 4 {
            return bad(format!("1 to 4 stages required, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.dim == 0 {
                return bad(format!("stage {i}: depth and dim must be positive"));
            }
            if i > 0 && s.dim != 2 * self.stages[i - 1].dim {
                return bad(format!("stage {i}: dim {} must double the previous {}", s.dim, self.stages[i - 1].dim));
            }
            if s.with_transformer_interleave && (s.heads == 0 || s.dim % s.heads != 0) {
                return bad(format!("stage {i}: dim {} not divisible by {} attention heads", s.dim, s.heads));
            }
        }
        for (k, v) in [
            ("patch_size", self.patch_size),
            ("n_windows", self.n_windows),
            ("frames", self.frames),
            ("n_mels", self.n_mels),
            ("state_size", self.state_size),
            ("expand", self.expand),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
            ("scan_chunk", self.scan_chunk),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.conv_kernel % 2 == 0 {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must lie in [0, 1), got {}", self.drop_path));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if self.frames % self.n_windows != 0 {
            return bad(format!("{} frames not divisible into {} windows", self.frames, self.n_windows));
        }
        let (h, w) = self.grid_size();
        let side = self.patch_size << (self.stages.len() - 1);
        if h % side != 0 || w % side != 0 {
            return bad(format!("{h}x{w} grid cannot be patched by {} and merged {} times", self.patch_size, self.stages.len() - 1));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 20] = [
        "variant",
        "dims",
        "depths",
        "heads",
        "interleave",
        "patch_size",
        "n_windows",
        "frames",
        "n_mels",
        "state_size",
        "expand",
        "mlp_ratio",
        "conv_kernel",
        "dt_rank",
        "share_directions",
        "drop_path",
        "n_classes",
        "scan_chunk",
        "ln_eps",
        "stages",
    ];

    /// Sets one field from text. Returns `Ok(false)` for keys this type does not own.
    ///
    /// `variant` resets the stage schedule, so callers apply it before other keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "variant" => {
                let interleave: Vec<bool> = self.stages.iter().map(|s| s.with_transformer_interleave).collect();
                self.apply_schedule(value.parse()?);
                for (s, on) in self.stages.iter_mut().zip(interleave) {
                    s.with_transformer_interleave = on;
                }
            }
            "stages" => {
                let n: usize = parse(key, value)?;
                if n == 0 || n > self.stages.len() {
                    return Err(Error::Config(format!("stages must be in 1..={}, got {n}", self.stages.len())));
                }
                self.stages.truncate(n);
            }
            "dims" => self.set_list(key, value, |s, v| s.dim = v)?,
            "depths" => self.set_list(key, value, |s, v| s.depth = v)?,
            "heads" => self.set_list(key, value, |s, v| s.heads = v)?,
            "interleave" => {
                let vals = list::<bool>(key, value)?;
                let n = self.stages.len();
                let vals = if vals.len() == 1 { vec![vals[0]; n] } else { vals };
                if vals.len() != n {
                    return Err(Error::Config(format!("interleave: {} values for {n} stages", vals.len())));
                }
                self.stages.iter_mut().zip(vals).for_each(|(s, v)| s.with_transformer_interleave = v);
            }
            "patch_size" => self.patch_size = parse(key, value)?,
            "n_windows" => self.n_windows = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "n_mels" => self.n_mels = parse(key, value)?,
            "state_size" => self.state_size = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "conv_kernel" => self.conv_kernel = parse(key, value)?,
            "dt_rank" => self.dt_rank = parse(key, value)?,
            "share_directions" => self.share_directions = parse(key, value)?,
            "drop_path" => self.drop_path = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "scan_chunk" => self.scan_chunk = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Applies a list whose length may differ from the current stage count;
    /// the stage count follows the list.
    fn set_list(&mut self, key: &str, value: &str, f: impl Fn(&mut StageConfig, usize)) -> Result<()> {
        let vals = list::<usize>(key, value)?;
        if vals.is_empty() || vals.len() > 4 {
            return Err(Error::Config(format!("{key}: expected 1 to 4 values, got {}", vals.len())));
        }
        while self.stages.len() < vals.len() {
            let last = self.stages.last().cloned().expect("at least one stage");
            self.stages.push(StageConfig { dim: last.dim * 2, heads: last.heads * 2, ..last });
        }
        self.stages.truncate(vals.len());
        self.stages.iter_mut().zip(vals).for_each(|(s, v)| f(s, v));
        Ok(())
    }

    /// Every field as `key=value`, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let join = |f: &dyn Fn(&StageConfig) -> String| self.stages.iter().map(f).collect::<Vec<_>>().join(",");
        vec![
            ("variant".into(), self.variant.to_string()),
            ("dims".into(), join(&|s| s.dim.to_string())),
            ("depths".into(), join(&|s| s.depth.to_string())),
            ("heads".into(), join(&|s| s.heads.to_string())),
            ("interleave".into(), join(&|s| s.with_transformer_interleave.to_string())),
            ("patch_size".into(), self.patch_size.to_string()),
            ("n_windows".into(), self.n_windows.to_string()),
            ("frames".into(), self.frames.to_string()),
            ("n_mels".into(), self.n_mels.to_string()),
            ("state_size".into(), self.state_size.to_string()),
            ("expand".into(), self.expand.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("conv_kernel".into(), self.conv_kernel.to_string()),
            ("dt_rank".into(), self.dt_rank.to_string()),
            ("share_directions".into(), self.share_directions.to_string()),
            ("drop_path".into(), self.drop_path.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("scan_chunk".into(), self.scan_chunk.to_string()),
            ("ln_eps".into(), self.ln_eps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Parses the output of [`ModelConfig::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs("<config>", text)?;
        let mut c = Self::nano();
        apply_pairs(&pairs, |k, v| c.set(k, v))?;
        c.validate()?;
        Ok(c)
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

/// A `key=value` line and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigPair {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits `key=value` text; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(origin: &str, text: &str) -> Result<Vec<ConfigPair>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
            path: origin.to_string(),
            line: i + 1,
            msg: format!("expected key=value, found {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::ConfigParse { path: origin.to_string(), line: i + 1, msg: "empty key".into() });
        }
        out.push(ConfigPair { key: key.to_string(), value: v.trim().to_string(), line: i + 1 });
    }
    Ok(out)
}

/// Feeds pairs to `set`, `variant` first. Unknown keys are an error.
pub fn apply_pairs(pairs: &[ConfigPair], mut set: impl FnMut(&str, &str) -> Result<bool>) -> Result<()> {
    let (first, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|p| p.key == "variant");
    for p in first.into_iter().chain(rest) {
        if !set(&p.key, &p.value)? {
            return Err(Error::Config(format!("unknown key {:?} (line {})", p.key, p.line)));
        }
    }
    Ok(())
}
