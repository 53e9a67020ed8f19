//! On-disk datasets: one directory per split holding `images/*.ppm` and a
//! tab-separated `manifest.tsv`.
//!
//! Manifest columns, in this order, after one header line:
//!
//! ```text
//! path  class_id  class_name  x  y  w  h  condition  size_bin  seed
//! ```
//!
//! `path` is relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::raster::RgbImage;
use super::scene::{ConditionTag, Sample, SceneGenerator, SizeBin};
use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::tensor::mix_seed;

pub const MANIFEST_HEADER: &str =
    "path\tclass_id\tclass_name\tx\ty\tw\th\tcondition\tsize_bin\tseed";
pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Reseeding budget per sample when a layout cannot be found.
const MAX_RESEEDS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn id(&self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub class_id: usize,
    pub class_name: String,
    pub bbox: BoundingBox,
    pub condition: ConditionTag,
    pub size_bin: SizeBin,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count(&self, condition: ConditionTag) -> usize {
        self.records
            .iter()
            .filter(|r| r.condition == condition)
            .count()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let b = r.bbox;
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.path,
                r.class_id,
                r.class_name,
                b.x,
                b.y,
                b.w,
                b.h,
                r.condition,
                r.size_bin,
                r.seed
            ));
        }
        out
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            _ => return Err(err(1, "missing manifest header".into())),
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let n = i + 1;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(err(n, format!("expected 10 fields, found {}", f.len())));
            }
            let int = |s: &str, name: &str| {
                s.parse::<usize>()
                    .map_err(|_| err(n, format!("bad {name} '{s}'")))
            };
            records.push(ManifestRecord {
                path: f[0].to_string(),
                class_id: int(f[1], "class_id")?,
                class_name: f[2].to_string(),
                bbox: BoundingBox::new(
                    int(f[3], "x")?,
                    int(f[4], "y")?,
                    int(f[5], "w")?,
                    int(f[6], "h")?,
                ),
                condition: f[7].parse().map_err(|e: Error| err(n, e.to_string()))?,
                size_bin: f[8].parse().map_err(|e: Error| err(n, e.to_string()))?,
                seed: f[9]
                    .parse()
                    .map_err(|_| err(n, format!("bad seed '{}'", f[9])))?,
            });
        }
        Ok(Manifest { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Manifest plus the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetSplit {
    /// Reads `<dir>/manifest.tsv`.
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(DatasetSplit {
            root: dir.to_path_buf(),
            manifest: Manifest::load(&dir.join(MANIFEST_FILE))?,
        })
    }

    pub fn image(&self, index: usize) -> Result<RgbImage> {
        RgbImage::load_ppm(&self.root.join(&self.manifest.records[index].path))
    }

    /// Decodes every image, in manifest order.
    pub fn images(&self) -> Result<Vec<RgbImage>> {
        (0..self.manifest.len()).map(|i| self.image(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Normal-condition training samples.
    pub train_count: usize,
    /// Test samples per condition, written in this order.
    pub test_counts: Vec<(ConditionTag, usize)>,
    pub threads: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_count: 4000,
            test_counts: ConditionTag::ALL.iter().map(|&c| (c, 400)).collect(),
            threads: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut seen = Vec::new();
        for (c, _) in &self.test_counts {
            if seen.contains(c) {
                return Err(Error::Config(format!("condition '{c}' listed twice")));
            }
            seen.push(*c);
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// `(condition, class_id)` for every sample of a split; classes cycle so
    /// that counts divisible by the class count are exactly balanced.
    pub fn plan(&self, split: Split, num_classes: usize) -> Vec<(ConditionTag, usize)> {
        match split {
            Split::Train => (0..self.train_count)
                .map(|i| (ConditionTag::Normal, i % num_classes))
                .collect(),
            Split::Test => self
                .test_counts
                .iter()
                .flat_map(|&(c, n)| (0..n).map(move |i| (c, i % num_classes)))
                .collect(),
        }
    }
}

/// Per-sample seed from the master seed, split, index and reseed attempt.
pub fn sample_seed(master: u64, split: Split, index: usize, attempt: u64) -> u64 {
    mix_seed(&[master, split.id(), index as u64, attempt])
}

impl SceneGenerator {
    /// Generates sample `index` of a split, reseeding on layout failure.
    pub fn dataset_sample(
        &self,
        master: u64,
        split: Split,
        index: usize,
        condition: ConditionTag,
        class_id: usize,
    ) -> Result<Sample> {
        let mut last = None;
        for attempt in 0..MAX_RESEEDS {
            match self.generate_sample(
                sample_seed(master, split, index, attempt),
                condition,
                class_id,
            ) {
                Err(e @ Error::Generation(_)) => last = Some(e),
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }

    /// All samples of a split, in manifest order.
    pub fn split_samples(
        &self,
        config: &DatasetConfig,
        master: u64,
        split: Split,
    ) -> Result<Vec<Sample>> {
        let plan = config.plan(split, self.roster.len());
        let threads = config.threads.min(plan.len()).max(1);
        if threads == 1 {
            return plan
                .iter()
                .enumerate()
                .map(|(i, &(c, k))| self.dataset_sample(master, split, i, c, k))
                .collect();
        }
        let chunk = plan.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Sample>>> = std::thread::scope(|s| {
            let handles: Vec<_> = plan
                .chunks(chunk)
                .enumerate()
                .map(|(ci, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(j, &(c, k))| {
                                self.dataset_sample(master, split, ci * chunk + j, c, k)
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generator thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(plan.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn write_split(&self, samples: &[Sample], dir: &Path) -> Result<Manifest> {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut manifest = Manifest::default();
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("images/{i:06}.ppm");
            s.image.save_ppm(&dir.join(&rel))?;
            manifest.records.push(ManifestRecord {
                path: rel,
                class_id: s.class_id,
                class_name: self.roster.get(s.class_id)?.name.to_string(),
                bbox: s.bbox,
                condition: s.condition,
                size_bin: s.size_bin,
                seed: s.seed,
            });
        }
        manifest.save(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }

    /// Writes `<out>/train` (Normal only) and `<out>/test` (every configured
    /// condition) and returns their manifests.
    pub fn build_dataset(
        &self,
        config: &DatasetConfig,
        master: u64,
        out: &Path,
    ) -> Result<(Manifest, Manifest)> {
        config.validate()?;
        let train = self.split_samples(config, master, Split::Train)?;
        let train = self.write_split(&train, &out.join(Split::Train.as_str()))?;
        let test = self.split_samples(config, master, Split::Test)?;
        let test = self.write_split(&test, &out.join(Split::Test.as_str()))?;
        Ok((train, test))
    }
}
