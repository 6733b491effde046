//! Synthetic age-regression datasets on icospheric grids and their JSON
//! manifests.
//!
//! Each sample draws an age `a ~ U[24, 45]` weeks. Channel `c` is a fixed
//! smooth field `b_c` scaled by a known linear function `g_c(t)` of
//! `t = (a - 24) / 21`, plus smooth noise drawn at a coarser grid and
//! upsampled. The age is spread over the whole sphere, not one patch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{vertex_count_for_order, Icosphere, Vec3};
use crate::resample::{resample_signal, SurfaceSignal};
use crate::rng::SeedStream;

pub const AGE_MIN: f64 = 24.0;
pub const AGE_MAX: f64 = 45.0;
pub const SCAN_AGE_JITTER: f64 = 1.0;
pub const CHANNELS: [&str; 4] = ["thickness", "curvature", "sulcal_depth", "myelin"];
pub const DEFAULT_NOISE: f64 = 0.05;
/// Coarsening between the signal grid and the grid the noise lives on.
pub const NOISE_ORDER_DROP: u32 = 2;
pub const MIN_SAMPLES: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DataError {
    #[error("grid order must be at least 1")]
    Order,
    #[error("need at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("noise amplitude must be finite and non-negative")]
    Noise,
    #[error("manifest not found: {0}")]
    MissingManifest(PathBuf),
    #[error("manifest is not valid JSON: {0}")]
    BadJson(String),
    #[error("sample {sample}: {msg}")]
    Integrity { sample: String, msg: String },
    #[error("sample {sample}: signal has {got} vertices, expected {expected} (10*4^{order}+2)")]
    VertexMismatch {
        sample: String,
        order: u32,
        expected: usize,
        got: usize,
    },
    #[error("dataset has no samples in split {0}")]
    EmptySplit(Split),
}

impl DataError {
    pub fn code(&self) -> &'static str {
        match self {
            DataError::Order => "order",
            DataError::TooFewSamples(_) => "too_few_samples",
            DataError::Noise => "noise",
            DataError::MissingManifest(_) => "missing_manifest",
            DataError::BadJson(_) => "bad_json",
            DataError::Integrity { .. } => "integrity",
            DataError::VertexMismatch { .. } => "vertex_mismatch",
            DataError::EmptySplit(_) => "empty_split",
        }
    }
}

/// Gestational-age category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaCategory {
    /// 37 weeks or more.
    Term,
    /// At least 32 and below 37 weeks.
    Preterm,
    /// Below 32 weeks.
    VeryPreterm,
}

impl GaCategory {
    pub const ALL: [GaCategory; 3] = [GaCategory::Term, GaCategory::Preterm, GaCategory::VeryPreterm];

    pub fn from_weeks(weeks: f64) -> Self {
        if weeks >= 37.0 {
            GaCategory::Term
        } else if weeks >= 32.0 {
            GaCategory::Preterm
        } else {
            GaCategory::VeryPreterm
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}, expected train, val or test")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Path relative to the manifest's directory.
    pub signal: String,
    pub label: f64,
    pub scan_age: Option<f64>,
    pub ga_category: GaCategory,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub grid_order: u32,
    pub channels: Vec<String>,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Checks that need no file access: splits, categories, label values.
    pub fn check_records(&self) -> std::result::Result<(), DataError> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.samples {
            let bad = |msg: String| DataError::Integrity {
                sample: s.signal.clone(),
                msg,
            };
            if let Some(prev) = seen.insert(&s.signal, s.split) {
                return Err(bad(if prev == s.split {
                    format!("listed twice in split {prev}")
                } else {
                    format!("appears in both {prev} and {} splits", s.split)
                }));
            }
            if !s.label.is_finite() || s.scan_age.is_some_and(|a| !a.is_finite()) {
                return Err(bad("non-finite label or scan age".into()));
            }
            if GaCategory::from_weeks(s.label) != s.ga_category {
                return Err(bad(format!("category {:?} disagrees with label {}", s.ga_category, s.label)));
            }
            if Path::new(&s.signal).is_absolute() {
                return Err(bad("signal path must be relative".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, DataError> {
        serde_json::from_str(text).map_err(|e| DataError::BadJson(e.to_string()))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        crate::binio::write_atomic(path, self.to_json().as_bytes())
    }

    /// Parse and check a manifest without reading the signals.
    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(DataError::MissingManifest(path.to_path_buf()).into())
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let m = Self::from_json(&text)?;
        m.check_records()?;
        Ok(m)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }
}

/// A manifest plus every signal, loaded and checked against the grid.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub signals: Vec<SurfaceSignal>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let expected = vertex_count_for_order(manifest.grid_order);
        let mut signals = Vec::with_capacity(manifest.samples.len());
        for s in &manifest.samples {
            let path = root.join(&s.signal);
            if !path.exists() {
                return Err(DataError::Integrity {
                    sample: s.signal.clone(),
                    msg: format!("signal file {} does not exist", path.display()),
                }
                .into());
            }
            let sig = SurfaceSignal::load(&path)?;
            if sig.vertex_count() != expected {
                return Err(DataError::VertexMismatch {
                    sample: s.signal.clone(),
                    order: manifest.grid_order,
                    expected,
                    got: sig.vertex_count(),
                }
                .into());
            }
            if sig.channels() != manifest.channels.as_slice() {
                return Err(DataError::Integrity {
                    sample: s.signal.clone(),
                    msg: format!("channels {:?} differ from manifest {:?}", sig.channels(), manifest.channels),
                }
                .into());
            }
            signals.push(sig);
        }
        Ok(Self {
            manifest,
            root,
            signals,
        })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        self.manifest.split_indices(split)
    }
}

/// Smooth basis fields, one per channel.
pub fn basis(channel: usize, p: Vec3) -> f64 {
    let [x, y, z] = p;
    match channel {
        0 => x * x,
        1 => y * y,
        2 => 1.0 + x * z,
        3 => 1.0 + (x + y + z) / 3f64.sqrt(),
        _ => panic!("channel {channel} out of range"),
    }
}

/// Exact spherical mean of each basis field.
pub const BASIS_MEANS: [f64; 4] = [1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0];

/// Age-dependent amplitude of each channel.
pub fn amplitude(channel: usize, age: f64) -> f64 {
    let t = (age - AGE_MIN) / (AGE_MAX - AGE_MIN);
    match channel {
        0 => 1.0 + t,
        1 => 2.0 - t,
        2 => 0.5 + 0.5 * t,
        3 => 1.0 + 0.5 * t,
        _ => panic!("channel {channel} out of range"),
    }
}

/// Signal-free part of a sample: `g_c(a) * b_c(v)` as f64.
pub fn clean_field(grid: &Icosphere, age: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.vertex_count() * CHANNELS.len());
    for &p in grid.vertices() {
        for c in 0..CHANNELS.len() {
            out.push(amplitude(c, age) * basis(c, p));
        }
    }
    out
}

pub fn noise_order(order: u32) -> u32 {
    order.saturating_sub(NOISE_ORDER_DROP)
}

/// Unit-variance white noise on the coarse grid for one sample.
pub fn coarse_noise(coarse: &Icosphere, rng: &mut SeedStream) -> SurfaceSignal {
    let n = coarse.vertex_count() * CHANNELS.len();
    let data = (0..n).map(|_| rng.normal() as f32).collect();
    SurfaceSignal::new(coarse.vertex_count(), channel_names(), data).expect("shape is consistent")
}

pub fn channel_names() -> Vec<String> {
    CHANNELS.iter().map(|s| s.to_string()).collect()
}

/// Area-weighted mean of every channel over the sphere.
pub fn spherical_means(grid: &Icosphere, signal: &SurfaceSignal) -> Vec<f64> {
    let areas = grid.mesh.vertex_areas();
    let total: f64 = areas.iter().sum();
    let c = signal.channel_count();
    let mut means = vec![0.0; c];
    for (v, &a) in areas.iter().enumerate() {
        for (k, m) in means.iter_mut().enumerate() {
            *m += a * signal.value(v, k) as f64;
        }
    }
    means.iter_mut().for_each(|m| *m /= total);
    debug_assert_eq!(areas.len(), signal.vertex_count());
    means
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub order: u32,
    pub samples: usize,
    pub seed: u64,
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(order: u32, samples: usize, seed: u64) -> Self {
        Self {
            order,
            samples,
            seed,
            noise: DEFAULT_NOISE,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), DataError> {
        if self.order < 1 {
            return Err(DataError::Order);
        }
        if self.samples < MIN_SAMPLES {
            return Err(DataError::TooFewSamples(self.samples));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(DataError::Noise);
        }
        Ok(())
    }
}

/// One generated sample before it is written.
#[derive(Debug, Clone)]
pub struct SynthSample {
    pub age: f64,
    pub scan_age: f64,
    pub signal: SurfaceSignal,
    /// Unscaled noise on the coarse grid.
    pub coarse_noise: SurfaceSignal,
    /// The same noise resampled onto the signal grid.
    pub noise: SurfaceSignal,
}

/// Split sizes 70/15/15 with rounding absorbed by the test split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.70 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    (train, val, n - train - val)
}

/// Generate samples in memory. Deterministic in `cfg.seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<(Vec<SynthSample>, Vec<Split>)> {
    cfg.validate()?;
    let grid = Icosphere::new(cfg.order);
    let coarse = Icosphere::new(noise_order(cfg.order));
    let root = SeedStream::new(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = root.split(i as u64);
        let age = rng.uniform(AGE_MIN, AGE_MAX);
        let scan_age = age + rng.uniform(-SCAN_AGE_JITTER, SCAN_AGE_JITTER);
        let low = coarse_noise(&coarse, &mut rng);
        let noise = resample_signal(&low, &coarse, &grid)?;
        let clean = clean_field(&grid, age);
        let data = clean
            .iter()
            .zip(noise.data())
            .map(|(&c, &n)| (c + cfg.noise * n as f64) as f32)
            .collect();
        let signal = SurfaceSignal::new(grid.vertex_count(), channel_names(), data)?;
        samples.push(SynthSample {
            age,
            scan_age,
            signal,
            coarse_noise: low,
            noise,
        });
    }
    let mut order: Vec<usize> = (0..cfg.samples).collect();
    root.split_named("splits").shuffle(&mut order);
    let (train, val, _) = split_sizes(cfg.samples);
    let mut splits = vec![Split::Test; cfg.samples];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok((samples, splits))
}

/// Generate a dataset under `out`: `manifest.json` plus `signals/*.sig`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let (samples, splits) = synthesize(cfg)?;
    let sig_dir = out.join("signals");
    std::fs::create_dir_all(&sig_dir).map_err(|e| Error::io(&sig_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, (s, split)) in samples.iter().zip(splits).enumerate() {
        let rel = format!("signals/sample_{i:05}.sig");
        s.signal.store(&out.join(&rel))?;
        records.push(SampleRecord {
            signal: rel,
            label: s.age,
            scan_age: Some(s.scan_age),
            ga_category: GaCategory::from_weeks(s.age),
            split,
        });
    }
    let manifest = DatasetManifest {
        grid_order: cfg.order,
        channels: channel_names(),
        seed: cfg.seed,
        samples: records,
    };
    let path = out.join("manifest.json");
    manifest.store(&path)?;
    Ok((manifest, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_at_boundaries() {
        assert_eq!(GaCategory::from_weeks(37.0), GaCategory::Term);
        assert_eq!(GaCategory::from_weeks(36.999), GaCategory::Preterm);
        assert_eq!(GaCategory::from_weeks(32.0), GaCategory::Preterm);
        assert_eq!(GaCategory::from_weeks(31.9), GaCategory::VeryPreterm);
    }

    #[test]
    fn split_sizes_sum() {
        assert_eq!(split_sizes(100), (70, 15, 15));
        for n in 10..200 {
            let (a, b, c) = split_sizes(n);
            assert_eq!(a + b + c, n);
            assert!(c > 0);
        }
    }

    #[test]
    fn bad_configs() {
        assert_eq!(SynthConfig::new(0, 20, 1).validate(), Err(DataError::Order));
        assert_eq!(SynthConfig::new(2, 9, 1).validate(), Err(DataError::TooFewSamples(9)));
    }

    #[test]
    fn overlapping_split_names_sample() {
        let rec = |split| SampleRecord {
            signal: "signals/a.sig".into(),
            label: 40.0,
            scan_age: None,
            ga_category: GaCategory::Term,
            split,
        };
        let m = DatasetManifest {
            grid_order: 2,
            channels: channel_names(),
            seed: 0,
            samples: vec![rec(Split::Train), rec(Split::Test)],
        };
        match m.check_records() {
            Err(DataError::Integrity { sample, msg }) => {
                assert_eq!(sample, "signals/a.sig");
                assert!(msg.contains("train") && msg.contains("test"));
            }
            other => panic!("{other:?}"),
        }
    }
}
