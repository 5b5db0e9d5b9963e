//! Raster and manifest I/O.
//!
//! A manifest is a plain-text `key = value` file; `#` starts a comment.
//! Paths are relative to the manifest's directory.
//!
//! ```text
//! classes = 6
//! height.scale = 1.0
//! norm.height.min = 0.0
//! norm.height.max = 0.93
//! tile.a.spectral = a_rgb.png
//! tile.a.height = a_height.png
//! tile.a.labels = a_labels.png
//! tile.a.split = train
//! ```
//!
//! Spectral rasters are 8- or 16-bit images with 1, 3 or 4 channels, scaled
//! to `[0, 1]`. Height rasters are single-channel; integer samples are scaled
//! to `[0, 1]` and multiplied by `height.scale`, float samples are taken as
//! is. The height channel is appended after the spectral channels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::palette::{decode_labels, encode_labels};
use super::{apply_range, channel_means, channel_range, ChannelRange, Dataset, Tile};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: BTreeMap<String, String>,
    /// Directory relative paths resolve against.
    pub dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("manifest line {}: expected `key = value`", i + 1)))?;
            if entries.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Data(format!("manifest line {}: duplicate key `{}`", i + 1, k.trim())));
            }
        }
        Ok(Manifest { entries, dir: dir.into() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.render()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn parse_key<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Data(format!("manifest key `{key}`: cannot parse `{v}`"))))
            .transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(|v| self.dir.join(v))
    }

    /// Tile ids in key order.
    pub fn tile_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("tile.")?.rsplit_once('.').map(|(id, _)| id.to_string()))
            .collect();
        ids.dedup();
        ids
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

/// Channel planes of a spectral raster scaled to `[0, 1]`, and its size.
pub fn read_spectral(path: &Path) -> Result<(Vec<Vec<f32>>, usize, usize)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = match img.color().channel_count() {
        1 | 2 => 1,
        3 => 3,
        _ => 4,
    };
    let buf = img.to_rgba32f();
    let mut planes = vec![Vec::with_capacity(w * h); channels];
    for px in buf.pixels() {
        if channels == 1 {
            planes[0].push(px.0[0]);
        } else {
            for (c, plane) in planes.iter_mut().enumerate() {
                plane.push(px.0[c]);
            }
        }
    }
    Ok((planes, h, w))
}

/// Height plane: integer samples scaled to `[0, scale]`, float samples as is.
pub fn read_height(path: &Path, scale: f32) -> Result<(Vec<f32>, usize, usize)> {
    let img = open(path)?;
    let float = matches!(img, DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_));
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = img.to_luma32f().into_raw();
    let k = if float { 1.0 } else { scale };
    Ok((plane.into_iter().map(|v| v * k).collect(), h, w))
}

pub fn read_labels(path: &Path, lenient: bool) -> Result<(Vec<u8>, usize, usize)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = decode_labels(img.as_raw(), lenient).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((labels, h, w))
}

pub fn write_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<()> {
    let rgb = encode_labels(labels)?;
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, rgb)
        .ok_or_else(|| Error::Data(format!("{} labels do not fill {h}x{w}", labels.len())))?;
    img.save(path).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes channels `0..3` of `tile` as 8-bit RGB.
pub fn write_spectral(path: &Path, tile: &Tile) -> Result<()> {
    let (h, w) = (tile.height(), tile.width());
    let mut raw = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push(quantize8(tile.spectral.plane(0, c)[i]));
        }
    }
    let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized buffer");
    img.save(path).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

/// Writes channel `c` of `tile` (values in `[0, 1]`) as 16-bit gray.
pub fn write_height(path: &Path, tile: &Tile, c: usize) -> Result<()> {
    let raw: Vec<u16> = tile.spectral.plane(0, c).iter().map(|&v| quantize16(v)).collect();
    let img: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(tile.width() as u32, tile.height() as u32, raw).expect("sized buffer");
    img.save(path).map_err(|source| Error::Image { path: path.display().to_string(), source })
}

/// Stacks a spectral raster and an optional height raster into `1 × K × H × W`.
pub fn read_image(spectral: &Path, height: Option<&Path>, height_scale: f32) -> Result<Tensor<f32>> {
    let (mut planes, h, w) = read_spectral(spectral)?;
    if let Some(hp) = height {
        let (plane, hh, hw) = read_height(hp, height_scale)?;
        if (hh, hw) != (h, w) {
            return Err(Error::Data(format!(
                "{}: height {hh}x{hw} does not match spectral {h}x{w}",
                hp.display()
            )));
        }
        planes.push(plane);
    }
    let k = planes.len();
    Tensor::from_vec(Shape::new(1, k, h, w), planes.concat())
}

/// A dataset as loaded from a manifest, normalized.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    /// Height range used for normalization, if the tiles carry height.
    pub height_range: Option<ChannelRange>,
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let m = Manifest::load(manifest_path)?;
    let classes: usize = m.parse_key("classes")?.unwrap_or(6);
    let scale: f32 = m.parse_key("height.scale")?.unwrap_or(1.0);
    let lenient: bool = m.parse_key("labels.lenient")?.unwrap_or(false);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    let mut with_height = None;
    for id in m.tile_ids() {
        let key = |f: &str| format!("tile.{id}.{f}");
        let spectral = m.path(&key("spectral")).ok_or_else(|| Error::Data(format!("tile `{id}` has no spectral raster")))?;
        let labels = m.path(&key("labels")).ok_or_else(|| Error::Data(format!("tile `{id}` has no label raster")))?;
        let height = m.path(&key("height"));
        if *with_height.get_or_insert(height.is_some()) != height.is_some() {
            return Err(Error::Data(format!("tile `{id}`: height raster present on some tiles only")));
        }
        let x = read_image(&spectral, height.as_deref(), scale)?;
        let (l, h, w) = read_labels(&labels, lenient)?;
        if (h, w) != (x.shape().height, x.shape().width) {
            return Err(Error::Data(format!("tile `{id}`: labels {h}x{w} do not match spectral {}", x.shape())));
        }
        let tile = Tile::new(id.clone(), x, l)?;
        match m.get(&key("split")).unwrap_or("train") {
            "train" => train.push(tile),
            "val" | "validation" => val.push(tile),
            other => return Err(Error::Data(format!("tile `{id}`: unknown split `{other}`"))),
        }
    }
    let height_channel = if with_height == Some(true) { train.first().map(|t| t.channels() - 1) } else { None };
    let mut dataset = Dataset::new(train, val, classes, height_channel)?;
    let height_range = match height_channel {
        Some(c) => {
            let recorded = (m.parse_key::<f32>("norm.height.min")?, m.parse_key::<f32>("norm.height.max")?);
            let range = match recorded {
                (Some(min), Some(max)) => ChannelRange { min, max },
                _ => channel_range(&dataset.train, c),
            };
            apply_range(&mut dataset.train, c, range);
            apply_range(&mut dataset.val, c, range);
            dataset.mean = channel_means(&dataset.train);
            Some(range)
        }
        None => None,
    };
    Ok(LoadedDataset { dataset, height_range })
}

/// Writes every tile of `ds` (spectral channels `0..3` plus the height
/// channel) under `dir` and returns the manifest path. The recorded height
/// range is that of the quantized training heights.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest { dir: dir.to_path_buf(), ..Default::default() };
    m.set("classes", ds.classes);
    m.set("height.scale", 1.0);
    let mut hmin = f32::INFINITY;
    let mut hmax = f32::NEG_INFINITY;
    for (split, tiles) in [("train", &ds.train), ("val", &ds.val)] {
        for t in tiles.iter() {
            if t.channels() < 3 {
                return Err(Error::Data(format!("tile `{}` has fewer than 3 spectral channels", t.id)));
            }
            let id = &t.id;
            write_spectral(&dir.join(format!("{id}_rgb.png")), t)?;
            write_labels(&dir.join(format!("{id}_labels.png")), &t.labels, t.height(), t.width())?;
            m.set(format!("tile.{id}.spectral"), format!("{id}_rgb.png"));
            m.set(format!("tile.{id}.labels"), format!("{id}_labels.png"));
            m.set(format!("tile.{id}.split"), split);
            if let Some(c) = ds.height_channel {
                write_height(&dir.join(format!("{id}_height.png")), t, c)?;
                m.set(format!("tile.{id}.height"), format!("{id}_height.png"));
                if split == "train" {
                    for &v in t.spectral.plane(0, c) {
                        let q = quantize16(v) as f32 / 65535.0;
                        hmin = hmin.min(q);
                        hmax = hmax.max(q);
                    }
                }
            }
        }
    }
    if ds.height_channel.is_some() && hmin.is_finite() {
        m.set("norm.height.min", hmin);
        m.set("norm.height.max", hmax);
    }
    let path = dir.join("manifest.txt");
    m.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, SynthConfig};

    #[test]
    fn manifest_parse() {
        let m = Manifest::parse("# c\nclasses = 6\ntile.a.split = val # x\ntile.a.spectral=a.png\n", "/d").unwrap();
        assert_eq!(m.get("classes"), Some("6"));
        assert_eq!(m.tile_ids(), vec!["a".to_string()]);
        assert_eq!(m.path("tile.a.spectral"), Some(PathBuf::from("/d/a.png")));
        assert!(Manifest::parse("novalue\n", ".").is_err());
        assert!(Manifest::parse("a = 1\na = 2\n", ".").is_err());
        assert!(m.parse_key::<u32>("tile.a.split").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(&SynthConfig::new(5, 2, 1, 80)).unwrap();
        let path = write_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&path).unwrap();
        let back = &loaded.dataset;
        assert_eq!(back.train.len(), 2);
        assert_eq!(back.val.len(), 1);
        assert_eq!(back.height_channel, Some(3));
        for (a, b) in ds.train.iter().zip(&back.train) {
            assert_eq!(a.labels, b.labels);
            for c in 0..3 {
                for (x, y) in a.spectral.plane(0, c).iter().zip(b.spectral.plane(0, c)) {
                    assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
                }
            }
            assert!(b.spectral.plane(0, 3).iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let r = loaded.height_range.unwrap();
        assert!(r.min >= 0.0 && r.max <= 1.0 && r.max > r.min);
    }
}
