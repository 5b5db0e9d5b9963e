//! Training configuration file: TOML with one table per concern. Every
//! table and key is optional; unknown ones are rejected. Defaults are those
//! of the selected architecture.
//!
//! ```toml
//! [data]
//! manifest = "synth/manifest.txt"
//!
//! [arch]
//! tag = "fpl"
//! width_divisor = 1
//!
//! [train]
//! epochs = 600
//! seed = 7
//! out = "fpl.ckpt"
//!
//! [sampler]
//! minibatch = 32
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use dlabel::optim::Schedule;
use dlabel::train::TrainConfig;
use dlabel::{ArchSpec, Error, Result};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub sampler: SamplerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub tag: Option<String>,
    pub width_divisor: Option<usize>,
    pub dropout: Option<f64>,
    pub tau: Option<f64>,
    pub dropout_before_pool: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Compresses the architecture's schedule to this many epochs.
    pub epochs: Option<u32>,
    /// Explicit `[[epochs, rate], ...]` blocks; overrides `epochs`.
    pub schedule: Option<Vec<(u32, f64)>>,
    pub minibatches_per_epoch: Option<usize>,
    pub val_patches: Option<usize>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub rotate: Option<bool>,
    pub grid_epochs: Option<u32>,
    pub grid_overlap: Option<usize>,
    pub seed: Option<u64>,
    pub warm_start: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub minibatch: Option<usize>,
    pub superbatch: Option<usize>,
    pub resample_interval: Option<u32>,
    pub balanced: Option<bool>,
    pub flips: Option<bool>,
    pub jitter_sigma: Option<f32>,
    pub jitter_exempt_height: Option<bool>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Applies `section.key=value` overrides, each parsed as a TOML value
    /// (bare words are taken as strings).
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let (section, name) =
                key.trim().split_once('.').ok_or_else(|| Error::Config(format!("override key `{key}` needs a section")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
            doc.entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?
                .insert(name.to_string(), value);
        }
        Self::parse(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn manifest(&self) -> Result<&Path> {
        let m = self.data.manifest.as_deref().ok_or_else(|| Error::Config("[data] manifest is required".into()))?;
        if !m.is_file() {
            return Err(Error::Config(format!("manifest {} does not exist", m.display())));
        }
        Ok(m)
    }

    /// Resolves the training configuration for a dataset with `channels`
    /// inputs and `classes` classes, checking referenced paths.
    pub fn train_config(&self, channels: usize, classes: usize) -> Result<TrainConfig> {
        let a = &self.arch;
        let mut spec = ArchSpec::new(a.tag.as_deref().unwrap_or("fpl"), channels, classes);
        spec.width_divisor = a.width_divisor.unwrap_or(spec.width_divisor);
        spec.dropout = a.dropout.unwrap_or(spec.dropout);
        spec.tau = a.tau.unwrap_or(spec.tau);
        spec.dropout_before_pool = a.dropout_before_pool.unwrap_or(spec.dropout_before_pool);
        let mut cfg = TrainConfig::new(spec)?;
        let t = &self.train;
        if let Some(blocks) = &t.schedule {
            cfg.schedule = Schedule::blocks(blocks)?;
        } else if let Some(e) = t.epochs {
            cfg.schedule = cfg.schedule.compressed(e)?;
        }
        cfg.minibatches_per_epoch = t.minibatches_per_epoch.unwrap_or(cfg.minibatches_per_epoch);
        cfg.momentum = t.momentum.unwrap_or(cfg.momentum);
        cfg.weight_decay = t.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.rotate = t.rotate.unwrap_or(cfg.rotate);
        cfg.grid_epochs = t.grid_epochs.unwrap_or(cfg.grid_epochs);
        cfg.grid_overlap = t.grid_overlap.unwrap_or(cfg.grid_overlap);
        cfg.seed = t.seed.unwrap_or(cfg.seed);
        cfg.checkpoint_dir = t.checkpoint_dir.clone();
        cfg.log_path = t.log.clone();
        let s = &self.sampler;
        if let Some(b) = s.minibatch {
            cfg.sampler.minibatch = b;
            cfg.sampler.superbatch = b * 500;
            cfg.val_patches = b * 100;
        }
        cfg.val_patches = t.val_patches.unwrap_or(cfg.val_patches);
        cfg.sampler.superbatch = s.superbatch.unwrap_or(cfg.sampler.superbatch);
        cfg.sampler.resample_interval = s.resample_interval.unwrap_or(cfg.sampler.resample_interval);
        cfg.sampler.balanced = s.balanced.unwrap_or(cfg.sampler.balanced);
        cfg.sampler.flips = s.flips.unwrap_or(cfg.sampler.flips);
        cfg.sampler.jitter_sigma = s.jitter_sigma.unwrap_or(cfg.sampler.jitter_sigma);
        cfg.sampler.jitter_exempt_height = s.jitter_exempt_height.unwrap_or(cfg.sampler.jitter_exempt_height);
        if let Some(w) = &t.warm_start {
            if !w.is_file() {
                return Err(Error::Config(format!("warm-start checkpoint {} does not exist", w.display())));
            }
        }
        for p in [&t.log, &t.out].into_iter().flatten() {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(Error::Config(format!("directory {} does not exist", parent.display())));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_architecture() {
        let c = RunConfig::parse("[arch]\ntag = \"pc\"\n").unwrap();
        let t = c.train_config(4, 6).unwrap();
        assert_eq!(t.sampler.minibatch, 128);
        assert_eq!(t.sampler.superbatch, 64_000);
        assert_eq!(t.val_patches, 12_800);
        assert_eq!(t.schedule.total_epochs(), 400);
        assert_eq!((t.momentum, t.weight_decay), (0.9, 0.01));
        let f = RunConfig::parse("").unwrap().train_config(4, 6).unwrap();
        assert_eq!((f.spec.tag.as_str(), f.sampler.minibatch, f.schedule.total_epochs()), ("fpl", 32, 600));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::parse("[nope]\n").is_err());
        assert!(RunConfig::parse("[arch]\ntag = \"zz\"\n").unwrap().train_config(4, 6).is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::with_overrides("[train]\nepochs = 8\n", &["train.epochs=4".into(), "arch.tag=spl".into()]).unwrap();
        assert_eq!(c.train.epochs, Some(4));
        assert_eq!(c.arch.tag.as_deref(), Some("spl"));
        assert!(RunConfig::with_overrides("", &["epochs=4".into()]).is_err());
        assert!(RunConfig::with_overrides("", &["train.bogus=4".into()]).is_err());
    }
}
