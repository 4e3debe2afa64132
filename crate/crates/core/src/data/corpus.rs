//! Procedural image-caption corpus with labels recoverable from pixels.
//!
//! Class `c` renders a sinusoidal grating whose orientation, frequency and
//! channel tint are fixed per class; each sample jitters phase and amplitude
//! and adds Gaussian noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::shard::{read_shards, write_shard, Record};
use crate::error::{Error, Result};

const DEFAULT_NAMES: [&str; 16] = [
    "apple", "bridge", "cloud", "desert", "engine", "forest", "guitar", "harbor", "island",
    "jacket", "kettle", "lantern", "meadow", "needle", "orchard", "pebble",
];

const TINTS: [[f64; 3]; 4] = [
    [1.0, 0.35, 0.35],
    [0.35, 1.0, 0.35],
    [0.35, 0.35, 1.0],
    [0.9, 0.9, 0.3],
];

fn default_templates() -> Vec<String> {
    vec![
        "a photo of a {}".into(),
        "a picture of the {}".into(),
        "an image showing a {}".into(),
        "the {} pattern".into(),
    ]
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.08
}

fn default_phase_jitter() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Trailing samples of each class routed to the holdout split.
    #[serde(default)]
    pub holdout_per_class: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_templates")]
    pub caption_templates: Vec<String>,
    /// Defaults to a fixed word list, then `pattern{c}`.
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Uniform phase jitter half-width in radians.
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f64,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, image_size: usize, seed: u64) -> Self {
        CorpusSpec {
            num_classes,
            samples_per_class,
            holdout_per_class: 0,
            image_size,
            channels: 3,
            caption_templates: default_templates(),
            class_names: None,
            noise_std: default_noise(),
            phase_jitter: default_phase_jitter(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.image_size == 0 {
            return Err(Error::config("image_size", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.holdout_per_class > self.samples_per_class {
            return Err(Error::config(
                "holdout_per_class",
                "exceeds samples_per_class",
            ));
        }
        if self.caption_templates.is_empty() {
            return Err(Error::config("caption_templates", "need at least one template"));
        }
        if let Some(t) = self.caption_templates.iter().find(|t| !t.contains("{}")) {
            return Err(Error::config(
                "caption_templates",
                format!("template {t:?} has no {{}} placeholder"),
            ));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::config(
                    "class_names",
                    format!("{} names for {} classes", names.len(), self.num_classes),
                ));
            }
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        match &self.class_names {
            Some(n) => n.clone(),
            None => (0..self.num_classes)
                .map(|c| {
                    DEFAULT_NAMES
                        .get(c)
                        .map_or_else(|| format!("pattern{c}"), |s| (*s).to_string())
                })
                .collect(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: CorpusSpec =
            toml::from_str(text).map_err(|e| Error::config("corpus spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Fixed grating parameters of a class.
#[derive(Debug, Clone, Copy)]
struct ClassPattern {
    theta: f64,
    /// Cycles across the image.
    freq: f64,
    phase: f64,
    tint: [f64; 3],
}

fn pattern(c: usize) -> ClassPattern {
    ClassPattern {
        theta: PI * (c % 4) as f64 / 4.0 + 0.1 * (c / 16) as f64,
        freq: 1.5 + 1.25 * ((c / 4) % 4) as f64,
        phase: 0.7 * c as f64,
        tint: TINTS[(c + c / 4) % TINTS.len()],
    }
}

/// Noise-free pixel value in [-0.4, 0.4] around mid-grey.
fn grating(p: &ClassPattern, ch: usize, x: usize, y: usize, size: usize, phase: f64) -> f64 {
    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
    let arg = 2.0 * PI * p.freq * (u * p.theta.cos() + v * p.theta.sin()) + phase;
    0.4 * p.tint[ch % 3] * arg.sin()
}

fn render<R: Rng>(spec: &CorpusSpec, class: usize, rng: &mut R) -> Vec<u8> {
    let p = pattern(class);
    let s = spec.image_size;
    let phase = p.phase + rng.random_range(-spec.phase_jitter..=spec.phase_jitter);
    let amp = rng.random_range(0.8..1.2);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut out = Vec::with_capacity(spec.channels * s * s);
    for ch in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                let v = 0.5 + amp * grating(&p, ch, x, y, s, phase) + n;
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Recovers the class of a generated image by correlating it against every
/// clean class template.
pub fn recover_class(image: &[u8], spec: &CorpusSpec) -> usize {
    let s = spec.image_size;
    let centred: Vec<f64> = image.iter().map(|&b| f64::from(b) / 255.0 - 0.5).collect();
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..spec.num_classes {
        let p = pattern(c);
        let (mut dot, mut norm) = (0.0, 0.0);
        for ch in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let t = grating(&p, ch, x, y, s, p.phase);
                    dot += t * centred[(ch * s + y) * s + x];
                    norm += t * t;
                }
            }
        }
        let score = dot / norm.sqrt().max(1e-12);
        if score > best.1 {
            best = (c, score);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Record>,
    pub holdout: Vec<Record>,
    pub class_names: Vec<String>,
}

/// Deterministic for a fixed spec. Records interleave classes.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let names = spec.names();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    let cut = spec.samples_per_class - spec.holdout_per_class;
    for i in 0..spec.samples_per_class {
        for (c, name) in names.iter().enumerate() {
            let image = render(spec, c, &mut rng);
            let t = &spec.caption_templates[rng.random_range(0..spec.caption_templates.len())];
            let rec = Record {
                class_id: c as u32,
                image,
                caption: t.replace("{}", name).into_bytes(),
            };
            if i < cut {
                train.push(rec);
            } else {
                holdout.push(rec);
            }
        }
    }
    Ok(Corpus {
        train,
        holdout,
        class_names: names,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: String,
    pub records: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub shards: Vec<ShardEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn shard_paths(&self, split: &str) -> Vec<PathBuf> {
        self.shards
            .iter()
            .filter(|s| s.split == split)
            .map(|s| self.root.join(&s.path))
            .collect()
    }

    pub fn read_split(&self, split: &str) -> Result<Vec<Record>> {
        read_shards(&self.shard_paths(split))
    }
}

/// Writes `train.cfsh`, `holdout.cfsh`, `classes.txt`, `templates.txt` and the
/// manifest into `dir`.
pub fn write_corpus(corpus: &Corpus, spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut shards = Vec::new();
    for (split, recs) in [("train", &corpus.train), ("holdout", &corpus.holdout)] {
        let file = PathBuf::from(format!("{split}.cfsh"));
        write_shard(recs, &dir.join(&file))?;
        shards.push(ShardEntry {
            path: file,
            split: split.into(),
            records: recs.len() as u64,
        });
    }
    let write_lines = |name: &str, lines: &[String]| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, lines.join("\n") + "\n").map_err(|e| Error::io(&p, e))
    };
    write_lines("classes.txt", &corpus.class_names)?;
    write_lines("templates.txt", &spec.caption_templates)?;
    let manifest = Manifest {
        seed: spec.seed,
        image_size: spec.image_size,
        channels: spec.channels,
        class_names: corpus.class_names.clone(),
        shards,
        root: dir.to_path_buf(),
    };
    let p = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: p.clone(),
        msg: e.to_string(),
    })?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}
