//! On-disk dataset: one binary record per sample plus a tab-separated manifest.
//!
//! Record layout (little-endian): magic `PCLD`, u32 point count, u32 label,
//! then `count × 3` f32 coordinates.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{derive_seed, tag};

use super::shapes::{generate_shape_with, ShapeClass, ShapeParams, MIN_POINTS, NUM_CLASSES};

pub const RECORD_MAGIC: &[u8; 4] = b"PCLD";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "dataset.conf";
const HEADER_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub n_points: usize,
    pub seed: u64,
    pub shape: ShapeParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_per_class: 250,
            test_per_class: 50,
            n_points: 1024,
            seed: 0,
            shape: ShapeParams::scan_like(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_class == 0 {
            return Err(Error::config("data.train_per_class", "must be at least 1"));
        }
        if self.n_points < MIN_POINTS {
            return Err(Error::config("data.points", format!("must be at least {MIN_POINTS}")));
        }
        if !(self.shape.noise >= 0.0 && self.shape.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.shape.anisotropy) {
            return Err(Error::config("data.anisotropy", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.shape.outliers) {
            return Err(Error::config("data.outliers", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Test => self.test_per_class,
        }
    }

    /// Seed of one sample; splits draw from disjoint streams.
    pub fn sample_seed(&self, split: Split, class: ShapeClass, index: usize) -> u64 {
        derive_seed(self.seed, &[tag(split.name()), class.id() as u64, index as u64])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<V: std::str::FromStr>(field: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("data.{field}"), format!("cannot parse `{}`", v.trim())))
        }
        match key {
            "train_per_class" => self.train_per_class = parse(key, value)?,
            "test_per_class" => self.test_per_class = parse(key, value)?,
            "points" => self.n_points = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "noise" => self.shape.noise = parse(key, value)?,
            "anisotropy" => self.shape.anisotropy = parse(key, value)?,
            "random_pose" => self.shape.random_pose = parse(key, value)?,
            "outliers" => self.shape.outliers = parse(key, value)?,
            _ => return Err(Error::config(format!("data.{key}"), "unknown key")),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("points", self.n_points.to_string()),
            ("seed", self.seed.to_string()),
            ("noise", self.shape.noise.to_string()),
            ("anisotropy", self.shape.anisotropy.to_string()),
            ("random_pose", self.shape.random_pose.to_string()),
            ("outliers", self.shape.outliers.to_string()),
        ]
    }

    fn to_text(&self) -> String {
        self.to_kv().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub class_id: u32,
    pub relpath: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn encode_record(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + cloud.len() * 12);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cloud.label.unwrap_or(u32::MAX).to_le_bytes());
    for p in &cloud.points {
        for c in p {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

pub fn decode_record(path: &Path, buf: &[u8]) -> Result<PointCloud> {
    if buf.len() < 4 {
        return Err(Error::format(path, buf.len() as u64, "truncated magic"));
    }
    if &buf[..4] != RECORD_MAGIC {
        return Err(Error::format(path, 0, "bad magic"));
    }
    if buf.len() < HEADER_LEN {
        return Err(Error::format(path, buf.len() as u64, "truncated header"));
    }
    let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().expect("4 bytes"));
    let count = word(4) as usize;
    let label = word(8);
    if count == 0 {
        return Err(Error::format(path, 4, "empty point cloud"));
    }
    let expected = HEADER_LEN + count * 12;
    if buf.len() < expected {
        return Err(Error::format(path, buf.len() as u64, format!("truncated payload, expected {expected} bytes")));
    }
    if buf.len() > expected {
        return Err(Error::format(path, expected as u64, "trailing bytes after payload"));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * 12;
        let p = [0, 1, 2].map(|j| f32::from_bits(word(at + 4 * j)));
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::format(path, at as u64, "non-finite coordinate"));
        }
        points.push(p);
    }
    let label = (label != u32::MAX).then_some(label);
    Ok(PointCloud { points, label })
}

pub fn write_record(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_record(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<PointCloud> {
    let buf = fs::read(path).map_err(|e| Error::format(path, 0, format!("cannot read record: {e}")))?;
    decode_record(path, &buf)
}

/// Writes records and a manifest for an explicit list of samples.
pub fn save_dataset(root: &Path, samples: &[(Split, PointCloud)]) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    let mut counters = std::collections::HashMap::new();
    for (split, cloud) in samples {
        let dir = root.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let class_id = cloud
            .label
            .ok_or_else(|| Error::invalid_arg("save_dataset: every sample needs a label"))?;
        let idx = counters.entry((*split, class_id)).or_insert(0usize);
        let name = match ShapeClass::from_id(class_id) {
            Ok(c) => format!("{}_{:05}.bin", c.name(), idx),
            Err(_) => format!("class{}_{:05}.bin", class_id, idx),
        };
        *idx += 1;
        let relpath = PathBuf::from(split.name()).join(name);
        write_record(&root.join(&relpath), cloud)?;
        entries.push(ManifestEntry {
            split: *split,
            class_id,
            relpath,
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        entries,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

fn write_manifest(manifest: &DatasetManifest) -> Result<()> {
    let mut text = String::new();
    for e in &manifest.entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.split, e.class_id, e.relpath.display()));
    }
    let path = manifest.root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Generates every sample of both splits and writes them under `root`.
pub fn build_dataset(config: &DatasetConfig, root: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut samples = Vec::with_capacity(NUM_CLASSES * (config.train_per_class + config.test_per_class));
    for split in [Split::Train, Split::Test] {
        for class in ShapeClass::ALL {
            for i in 0..config.per_class(split) {
                let seed = config.sample_seed(split, class, i);
                samples.push((split, generate_shape_with(class, &config.shape, config.n_points, seed)?));
            }
        }
    }
    let manifest = save_dataset(root, &samples)?;
    let conf = root.join(CONFIG_FILE);
    fs::write(&conf, config.to_text()).map_err(|e| Error::io(&conf, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.is_empty() {
            let fields: Vec<&str> = body.split('\t').collect();
            let bad = |msg: &str| Error::format(&path, offset, msg.to_string());
            if fields.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let split = Split::parse(fields[0]).ok_or_else(|| bad("unknown split"))?;
            let class_id = fields[1].parse::<u32>().map_err(|_| bad("bad class id"))?;
            let relpath = PathBuf::from(fields[2]);
            if relpath.is_absolute() {
                return Err(bad("manifest paths must be relative"));
            }
            entries.push(ManifestEntry {
                split,
                class_id,
                relpath,
            });
        }
        offset += line.len() as u64;
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
    })
}

/// Loads every sample of `split`, checking record labels against the manifest.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<PointCloud>> {
    manifest
        .split(split)
        .map(|e| {
            let path = manifest.root.join(&e.relpath);
            let cloud = read_record(&path)?;
            if cloud.label != Some(e.class_id) {
                return Err(Error::format(&path, 8, format!("label disagrees with manifest class {}", e.class_id)));
            }
            Ok(cloud)
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    let manifest = load_manifest(root)?;
    Ok((load_split(&manifest, Split::Train)?, load_split(&manifest, Split::Test)?))
}
