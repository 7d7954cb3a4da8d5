//! Model weights in the tensor archive, with a `__config__` text entry.

use std::collections::BTreeSet;
use std::path::Path;

use crate::archive::{Archive, Entry, Payload};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::network::Model;
use crate::tensor::Float;

pub const CONFIG_ENTRY: &str = "__config__";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strictness {
    /// Names and shapes must match exactly.
    Strict,
    /// Load the matching intersection, report the rest.
    Permissive,
}

/// Outcome of loading an archive into a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the archive.
    pub missing: BTreeSet<String>,
    /// Archive entries the model does not have.
    pub extra: BTreeSet<String>,
    /// Present in both with different shapes; left at their current value.
    pub shape_conflicts: Vec<(String, Vec<usize>, Vec<usize>)>,
}

impl LoadReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.shape_conflicts.is_empty()
    }
}

impl<T: Float> Model<T> {
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, t) in self.params.names().zip(&self.params.tensors) {
            a.push(Entry::tensor(name, t)).expect("parameter names are unique");
        }
        a.push(Entry::bytes(CONFIG_ENTRY, self.config.to_text().into_bytes())).expect("reserved name");
        a
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Copies archive tensors into this model.
    pub fn load_archive(&mut self, archive: &Archive, strictness: Strictness) -> Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut staged = Vec::new();
        for (i, name) in self.params.names().enumerate() {
            match archive.get(name) {
                None => {
                    report.missing.insert(name.to_string());
                }
                Some(e) => {
                    let have = self.params.tensors[i].shape().to_vec();
                    if e.shape() != have {
                        report.shape_conflicts.push((name.to_string(), have, e.shape()));
                    } else {
                        staged.push((i, e.to_tensor::<T>()?));
                        report.loaded.push(name.to_string());
                    }
                }
            }
        }
        for e in &archive.entries {
            if e.name != CONFIG_ENTRY && self.params.index_of(&e.name).is_none() {
                report.extra.insert(e.name.clone());
            }
        }
        if strictness == Strictness::Strict && !report.is_complete() {
            let conflicts: Vec<String> =
                report.shape_conflicts.iter().map(|(n, a, b)| format!("{n}: model {a:?}, archive {b:?}")).collect();
            return Err(Error::Format(format!(
                "strict load failed: missing {:?}, extra {:?}, shape conflicts {:?}",
                report.missing, report.extra, conflicts
            )));
        }
        for (i, t) in staged {
            self.params.tensors[i] = t;
        }
        Ok(report)
    }
}

/// Configuration echoed in an archive.
pub fn archive_config(archive: &Archive) -> Result<ModelConfig> {
    let e = archive.get(CONFIG_ENTRY).ok_or_else(|| Error::Format("archive has no __config__ entry".into()))?;
    match &e.payload {
        Payload::Bytes(b) => {
            let text = std::str::from_utf8(b).map_err(|_| Error::Format("__config__ is not UTF-8".into()))?;
            ModelConfig::from_text(text)
        }
        _ => Err(Error::Format("__config__ entry must hold bytes".into())),
    }
}

/// Rebuilds a model from a checkpoint, using its echoed configuration.
pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>, strictness: Strictness) -> Result<(Model<T>, LoadReport)> {
    let archive = Archive::load(path)?;
    let config = archive_config(&archive)?;
    let mut model = Model::new(config, 0)?;
    let report = model.load_archive(&archive, strictness)?;
    Ok((model, report))
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}
