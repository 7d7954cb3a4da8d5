use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{clip_features, wav_features, write_wav, AudioClip, FeatureCache, FrontendConfig, MelSpectrogram, WavEncoding};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub labels: Vec<usize>,
}

/// `path,labels` CSV with `;`-separated integer class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub n_classes: usize,
    pub split: Split,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>, n_classes: usize, split: Split) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        Self::parse(&text, path, n_classes, split)
    }

    /// Rows are numbered from 1 for the first data row after the header.
    pub fn parse(text: &str, origin: &Path, n_classes: usize, split: Split) -> Result<Self> {
        let err = |row: usize, msg: String| Error::Manifest { path: origin.to_path_buf(), row, msg };
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "labels" {
            return Err(err(0, format!("header must be `path,labels`, found {:?}", headers.iter().collect::<Vec<_>>())));
        }
        let base = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| err(row, e.to_string()))?;
            let raw = rec.get(0).unwrap_or("");
            if raw.is_empty() {
                return Err(err(row, "empty path".into()));
            }
            let labels: Vec<usize> = rec
                .get(1)
                .unwrap_or("")
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    let id: usize = s.parse().map_err(|_| err(row, format!("label {s:?} is not a class id")))?;
                    if id >= n_classes {
                        return Err(err(row, format!("label {id} outside 0..{n_classes}")));
                    }
                    Ok(id)
                })
                .collect::<Result<_>>()?;
            if !seen.insert(raw.to_string()) {
                return Err(err(row, format!("duplicate path {raw:?}")));
            }
            rows.push(ManifestRow { path: base.join(raw), labels });
        }
        Ok(Self { rows, n_classes, split })
    }

    /// Writes rows with paths relative to `path`'s directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_writer(Vec::new());
        let map_err = |e: csv::Error| Error::Value(e.to_string());
        w.write_record(["path", "labels"]).map_err(map_err)?;
        for r in &self.rows {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            let labels: Vec<String> = r.labels.iter().map(usize::to_string).collect();
            w.write_record([p.to_string_lossy().as_ref(), labels.join(";").as_str()]).map_err(map_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Value(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Decoded features and labels held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// `[T, F]` log-mel spectrograms.
    pub features: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<usize>>,
    pub n_classes: usize,
    /// Manifest rows that could not be read, with the reason.
    pub skipped: Vec<(usize, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Decodes every row, in parallel with results kept in manifest order. With `skip_unreadable`, rows that fail to decode
    /// are recorded in `skipped` instead of aborting.
    pub fn from_manifest(m: &Manifest, cfg: &FrontendConfig, cache: Option<&FeatureCache>, skip_unreadable: bool) -> Result<Self> {
        let decoded: Vec<Result<MelSpectrogram>> = m.rows.par_iter().map(|row| wav_features(&row.path, cfg, cache)).collect();
        let mut ds = Dataset { n_classes: m.n_classes, ..Default::default() };
        for (i, (row, mel)) in m.rows.iter().zip(decoded).enumerate() {
            match mel {
                Ok(mel) => {
                    ds.features.push(mel.values);
                    ds.labels.push(row.labels.clone());
                }
                Err(e) if skip_unreadable => {
                    log::warn!("skipping manifest row {}: {e}", i + 1);
                    ds.skipped.push((i + 1, e.to_string()));
                }
                Err(e) => {
                    return Err(Error::Manifest { path: row.path.clone(), row: i + 1, msg: e.to_string() });
                }
            }
        }
        Ok(ds)
    }

    /// Multi-hot target row.
    pub fn target(&self, i: usize) -> Vec<f32> {
        let mut t = vec![0.0; self.n_classes];
        self.labels[i].iter().for_each(|&c| t[c] = 1.0);
        t
    }
}

/// Clip whose spectrum identifies `class`: a tone at a class-specific
/// frequency plus its octave, over faint noise.
pub fn synthetic_clip(class: usize, samples: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = 220.0 * 2f64.powf(class as f64 * 0.75);
    let data = (0..samples)
        .map(|i| {
            let t = i as f64 / sample_rate as f64;
            let s = 0.4 * (2.0 * PI * f0 * t).sin() + 0.2 * (4.0 * PI * f0 * t).sin() + 0.01 * rng.random_range(-1.0..1.0);
            s as f32
        })
        .collect();
    AudioClip::new(data, sample_rate)
}

/// `n` in-memory clips, clip `i` labelled `i % n_classes`.
pub fn synthetic_dataset(n: usize, n_classes: usize, cfg: &FrontendConfig, seed: u64) -> Result<Dataset> {
    let samples = cfg.target_frames * cfg.mel.hop;
    let mut ds = Dataset { n_classes, ..Default::default() };
    for i in 0..n {
        let class = i % n_classes;
        let clip = synthetic_clip(class, samples, cfg.mel.sample_rate, seed.wrapping_add(i as u64));
        ds.features.push(clip_features(&clip, cfg)?.values);
        ds.labels.push(vec![class]);
    }
    Ok(ds)
}

/// Writes `n` synthetic 16-bit WAVs and a manifest into `dir`, returning the
/// manifest path.
pub fn write_synthetic_corpus(dir: &Path, n: usize, n_classes: usize, cfg: &FrontendConfig, seed: u64) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let samples = cfg.target_frames * cfg.mel.hop;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let path = dir.join(format!("clip_{i:03}.wav"));
        write_wav(&path, &synthetic_clip(class, samples, cfg.mel.sample_rate, seed.wrapping_add(i as u64)), WavEncoding::Pcm16)?;
        rows.push(ManifestRow { path, labels: vec![class] });
    }
    let manifest = dir.join("manifest.csv");
    Manifest { rows, n_classes, split: Split::Train }.save(&manifest)?;
    Ok(manifest)
}
