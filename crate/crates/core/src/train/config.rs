use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frontend::{FrontendConfig, MelConfig, ResampleMethod};
use crate::model::{apply_pairs, parse_pairs, ModelConfig};

/// Optimization and schedule settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub cutmix_prob: f64,
    pub cutmix_alpha: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.05,
            warmup_steps: 1000,
            total_steps: 20000,
            cutmix_prob: 0.5,
            cutmix_alpha: 1.0,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            eval_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad(format!("lr {}, weight_decay {}, clip_norm {} out of range", self.lr, self.weight_decay, self.clip_norm));
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) {
            return bad(format!("cutmix_prob must be in [0, 1], got {}", self.cutmix_prob));
        }
        if !(self.cutmix_alpha > 0.0) {
            return bad(format!("cutmix_alpha must be positive, got {}", self.cutmix_alpha));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "cutmix_prob" => self.cutmix_prob = parse(key, value)?,
            "cutmix_alpha" => self.cutmix_alpha = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("weight_decay".into(), self.weight_decay.to_string()),
            ("warmup_steps".into(), self.warmup_steps.to_string()),
            ("total_steps".into(), self.total_steps.to_string()),
            ("cutmix_prob".into(), self.cutmix_prob.to_string()),
            ("cutmix_alpha".into(), self.cutmix_alpha.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
            ("eval_every".into(), self.eval_every.to_string()),
        ]
    }
}

/// Audio decoding settings not implied by the model (frames and mel bins
/// come from [`ModelConfig`]).
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub win: usize,
    pub hop: usize,
    pub resample: ResampleMethod,
    pub truncate: bool,
    pub allow_short: bool,
    /// Skip rows whose audio cannot be decoded instead of aborting.
    pub skip_unreadable: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let m = MelConfig::default();
        Self {
            sample_rate: m.sample_rate,
            win: m.win,
            hop: m.hop,
            resample: ResampleMethod::Linear,
            truncate: false,
            allow_short: false,
            skip_unreadable: false,
        }
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "sample_rate" => self.sample_rate = parse(key, value)?,
            "win" => self.win = parse(key, value)?,
            "hop" => self.hop = parse(key, value)?,
            "resample" => self.resample = parse(key, value)?,
            "truncate" => self.truncate = parse(key, value)?,
            "allow_short" => self.allow_short = parse(key, value)?,
            "skip_unreadable" => self.skip_unreadable = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("win".into(), self.win.to_string()),
            ("hop".into(), self.hop.to_string()),
            ("resample".into(), self.resample.to_string()),
            ("truncate".into(), self.truncate.to_string()),
            ("allow_short".into(), self.allow_short.to_string()),
            ("skip_unreadable".into(), self.skip_unreadable.to_string()),
        ]
    }
}

/// Everything a training or evaluation run reads from its config file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::nano(), train: TrainConfig::default(), data: DataConfig::default() }
    }
}

impl RunConfig {
    /// Small end-to-end setup: the toy backbone on 0.64 s clips.
    pub fn toy(n_classes: usize) -> Self {
        let train = TrainConfig {
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            warmup_steps: 10,
            total_steps: 300,
            cutmix_prob: 0.0,
            checkpoint_every: 100,
            eval_every: 50,
            ..TrainConfig::default()
        };
        Self { model: ModelConfig::toy(n_classes), train, data: DataConfig::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        Ok(self.model.set(key, value)? || self.train.set(key, value)? || self.data.set(key, value)?)
    }

    /// Applies `key=value` text on top of `self`. Errors carry `origin` and
    /// the line number.
    pub fn apply_text(&mut self, origin: &str, text: &str) -> Result<()> {
        let pairs = parse_pairs(origin, text)?;
        apply_pairs(&pairs, |k, v| {
            self.set(k, v).map_err(|e| match e {
                Error::Config(msg) => {
                    let line = pairs.iter().find(|p| p.key == k).map_or(0, |p| p.line);
                    Error::ConfigParse { path: origin.to_string(), line, msg }
                }
                e => e,
            })
        })
        .map_err(|e| match e {
            Error::Config(msg) => {
                let line = msg.rsplit("line ").next().and_then(|s| s.trim_end_matches(')').parse().ok()).unwrap_or(0);
                Error::ConfigParse { path: origin.to_string(), line, msg }
            }
            e => e,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let mut c = Self::default();
        c.apply_text(&path.display().to_string(), &text)?;
        Ok(c)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        if !self.set(k, v)? {
            return Err(Error::Config(format!("unknown key {k:?}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.hop == 0 || self.data.win == 0 || self.data.sample_rate == 0 {
            return Err(Error::Config("sample_rate, win and hop must be positive".into()));
        }
        Ok(())
    }

    pub fn frontend(&self) -> FrontendConfig {
        let d = &self.data;
        FrontendConfig {
            mel: MelConfig {
                sample_rate: d.sample_rate,
                win: d.win,
                hop: d.hop,
                n_mels: self.model.n_mels,
                allow_short: d.allow_short,
                ..MelConfig::default()
            },
            target_frames: self.model.frames,
            resample: d.resample,
            truncate: d.truncate,
        }
    }

    /// Every setting, one `key=value` per entry, for run logs.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = self.model.echo();
        out.extend(self.train.echo());
        out.extend(self.data.echo());
        out
    }

    pub fn to_text(&self) -> String {
        self.echo().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy(8);
        c.apply_override("lr=0.01").unwrap();
        c.apply_override("hop=160").unwrap();
        let mut back = RunConfig::default();
        back.apply_text("x", &c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.frontend().mel.hop, 160);
        assert_eq!(back.frontend().target_frames, 64);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut c = RunConfig::default();
        let err = c.apply_text("run.cfg", "lr=0.1\n\nbogus=3\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 3, .. }), "{err}");
        let err = c.apply_text("run.cfg", "# c\nlr=fast\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }), "{err}");
        let err = c.apply_text("run.cfg", "lr 0.1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }));
        assert!(c.apply_override("nope=1").is_err());
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.validate().unwrap();
        c.train.cutmix_prob = 1.5;
        assert!(c.validate().is_err());
        c.train.cutmix_prob = 0.5;
        c.train.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
