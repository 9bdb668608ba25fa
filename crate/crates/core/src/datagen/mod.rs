//! Synthetic multi-domain dataset generation, split assignment and the
//! manifest format.

mod render;

pub use render::{render, Prototype, STYLES, STYLE_NAMES};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_ppm, write_ppm, Image};
use crate::rng::Rng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestQuery,
    TestGallery,
}

/// One manifest entry; `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub class_id: usize,
    pub domain_id: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_classes: usize,
    pub n_domains: usize,
    pub seen_class_ids: Vec<usize>,
    pub seen_domain_ids: Vec<usize>,
    pub generator_seed: u64,
    pub samples: Vec<SampleRecord>,
}

static LABEL_READS: AtomicU64 = AtomicU64::new(0);

/// Total number of [`ImageSample::class_id`] calls in this process.
pub fn label_reads() -> u64 {
    LABEL_READS.load(Ordering::SeqCst)
}

/// A decoded image with its metadata. Class-label reads are counted so
/// label-free code paths can be audited.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    class_id: usize,
    pub domain_id: usize,
    pub split: Split,
}

/// What test-time training is allowed to see: pixels and an id.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub id: String,
    pub image: Image,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Image, class_id: usize, domain_id: usize, split: Split) -> Self {
        Self {
            id: id.into(),
            image,
            class_id,
            domain_id,
            split,
        }
    }

    pub fn class_id(&self) -> usize {
        LABEL_READS.fetch_add(1, Ordering::SeqCst);
        self.class_id
    }

    pub fn unlabeled(&self) -> UnlabeledSample {
        UnlabeledSample {
            id: self.id.clone(),
            image: self.image.clone(),
        }
    }
}

pub fn strip_labels(samples: &[ImageSample]) -> Vec<UnlabeledSample> {
    samples.iter().map(ImageSample::unlabeled).collect()
}

/// Relabels samples with their position in `class_ids`, giving the compact
/// labels pretraining expects.
pub fn compact_labels(samples: &[ImageSample], class_ids: &[usize]) -> Result<Vec<ImageSample>> {
    samples
        .iter()
        .map(|s| {
            let c = s.class_id();
            let label = class_ids.iter().position(|&k| k == c).ok_or_else(|| {
                manifest_err("class_id", Some(&s.id), format!("class {c} is not among {class_ids:?}"))
            })?;
            Ok(ImageSample { class_id: label, ..s.clone() })
        })
        .collect()
}

/// How classes and domains are divided between training and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub unseen_fraction: f64,
    /// Domain whose images form the query set; never used for training.
    pub holdout_domain: usize,
    /// Domain whose images form the search set.
    pub gallery_domain: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            unseen_fraction: 1.0 / 3.0,
            holdout_domain: 1,
            gallery_domain: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    pub per_cell: usize,
    pub image_size: usize,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_classes: 12,
            n_domains: 4,
            per_cell: 50,
            image_size: 36,
            seed: 0,
            split: SplitConfig::default(),
        }
    }
}

fn sample_stream(class_id: usize, domain_id: usize, index: usize) -> u64 {
    ((class_id as u64) << 40) | ((domain_id as u64) << 20) | index as u64
}

fn sample_id(class_id: usize, domain_id: usize, index: usize) -> String {
    format!("c{class_id:03}_d{domain_id}_{index:04}")
}

/// Renders sample `index` of cell `(class_id, domain_id)`.
pub fn render_sample(seed: u64, class_id: usize, domain_id: usize, index: usize, size: usize) -> Image {
    let proto = Prototype::new(class_id, seed);
    let mut rng = Rng::new(seed).fork(sample_stream(class_id, domain_id, index));
    render(&proto, domain_id, size, &mut rng)
}

fn check_gen(cfg: &GenConfig) -> Result<()> {
    if cfg.n_classes < 2 || cfg.n_domains < 2 {
        return Err(Error::contract(format!(
            "need at least 2 classes and 2 domains, got {} and {}",
            cfg.n_classes, cfg.n_domains
        )));
    }
    if cfg.per_cell == 0 || cfg.image_size < 3 {
        return Err(Error::contract("per_cell must be positive and image_size at least 3"));
    }
    Ok(())
}

/// Generates every sample in memory, with UCDR splits assigned.
pub fn generate_samples(cfg: &GenConfig) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    check_gen(cfg)?;
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for c in 0..cfg.n_classes {
        for d in 0..cfg.n_domains {
            for i in 0..cfg.per_cell {
                cells.push((c, d, i));
                let id = sample_id(c, d, i);
                records.push(SampleRecord {
                    path: format!("images/{id}.ppm"),
                    id,
                    class_id: c,
                    domain_id: d,
                    split: Split::Train,
                });
            }
        }
    }
    let manifest = make_ucdr_split(
        &DatasetManifest {
            n_classes: cfg.n_classes,
            n_domains: cfg.n_domains,
            seen_class_ids: (0..cfg.n_classes).collect(),
            seen_domain_ids: (0..cfg.n_domains).collect(),
            generator_seed: cfg.seed,
            samples: records,
        },
        &cfg.split,
    )?;
    let images: Vec<Image> = cells
        .par_iter()
        .map(|&(c, d, i)| render_sample(cfg.seed, c, d, i, cfg.image_size))
        .collect();
    let samples = manifest
        .samples
        .iter()
        .zip(images)
        .map(|(r, img)| ImageSample::new(r.id.clone(), img, r.class_id, r.domain_id, r.split))
        .collect();
    Ok((manifest, samples))
}

/// Writes PPM files under `out/images/` and `out/manifest.json`.
pub fn generate_dataset(cfg: &GenConfig, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out = out.as_ref();
    let (manifest, samples) = generate_samples(cfg)?;
    fs::create_dir_all(out.join("images"))?;
    manifest
        .samples
        .par_iter()
        .zip(samples.par_iter())
        .try_for_each(|(r, s)| write_ppm(&s.image, out.join(&r.path)))?;
    save_manifest(&manifest, out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn split_rng_seed(seed: u64) -> Rng {
    Rng::new(seed).fork(0x5_1117)
}

/// Assigns splits from the class and domain of every sample.
///
/// * train: seen classes in non-holdout domains, except that only the even
///   samples of each seen class in the gallery domain are used
/// * test_gallery: the remaining gallery-domain samples (all classes)
/// * test_query: every sample of the holdout domain
/// * val: unseen classes in the other domains
pub fn make_ucdr_split(manifest: &DatasetManifest, cfg: &SplitConfig) -> Result<DatasetManifest> {
    let n = manifest.n_classes;
    if cfg.holdout_domain >= manifest.n_domains || cfg.gallery_domain >= manifest.n_domains {
        return Err(Error::contract(format!(
            "holdout domain {} / gallery domain {} outside 0..{}",
            cfg.holdout_domain, cfg.gallery_domain, manifest.n_domains
        )));
    }
    if cfg.holdout_domain == cfg.gallery_domain {
        return Err(Error::contract("holdout and gallery domain must differ"));
    }
    let n_unseen = (n as f64 * cfg.unseen_fraction).round() as usize;
    if n_unseen < 1 || n_unseen >= n {
        return Err(Error::contract(format!(
            "unseen fraction {} of {n} classes gives {n_unseen} unseen classes; need 1..{n}",
            cfg.unseen_fraction
        )));
    }
    let mut classes: Vec<usize> = (0..n).collect();
    split_rng_seed(manifest.generator_seed).shuffle(&mut classes);
    let mut unseen = classes[..n_unseen].to_vec();
    unseen.sort_unstable();
    let seen_class_ids: Vec<usize> = (0..n).filter(|c| !unseen.contains(c)).collect();
    let seen_domain_ids: Vec<usize> = (0..manifest.n_domains).filter(|&d| d != cfg.holdout_domain).collect();

    let mut gallery_counter = std::collections::HashMap::new();
    let samples = manifest
        .samples
        .iter()
        .map(|r| {
            let seen = !unseen.contains(&r.class_id);
            let split = if r.domain_id == cfg.holdout_domain {
                Split::TestQuery
            } else if r.domain_id == cfg.gallery_domain {
                let k = gallery_counter.entry(r.class_id).or_insert(0usize);
                *k += 1;
                if seen && *k % 2 == 1 {
                    Split::Train
                } else {
                    Split::TestGallery
                }
            } else if seen {
                Split::Train
            } else {
                Split::Val
            };
            SampleRecord { split, ..r.clone() }
        })
        .collect();
    let out = DatasetManifest {
        n_classes: n,
        n_domains: manifest.n_domains,
        seen_class_ids,
        seen_domain_ids,
        generator_seed: manifest.generator_seed,
        samples,
    };
    out.validate()?;
    Ok(out)
}

fn manifest_err(field: impl Into<String>, sample: Option<&str>, msg: impl Into<String>) -> Error {
    Error::Manifest {
        field: field.into(),
        sample: sample.map(str::to_string),
        msg: msg.into(),
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_domains == 0 {
            return Err(manifest_err("n_classes", None, "class and domain counts must be positive"));
        }
        for (field, ids, bound) in [
            ("seen_class_ids", &self.seen_class_ids, self.n_classes),
            ("seen_domain_ids", &self.seen_domain_ids, self.n_domains),
        ] {
            let mut set = HashSet::new();
            for &id in ids {
                if id >= bound || !set.insert(id) {
                    return Err(manifest_err(field, None, format!("id {id} out of range or repeated")));
                }
            }
        }
        let mut ids = HashSet::new();
        for s in &self.samples {
            let sid = Some(s.id.as_str());
            if !ids.insert(s.id.as_str()) {
                return Err(manifest_err("id", sid, "duplicate sample id"));
            }
            if s.class_id >= self.n_classes {
                return Err(manifest_err(
                    "class_id",
                    sid,
                    format!("{} not below n_classes = {}", s.class_id, self.n_classes),
                ));
            }
            if s.domain_id >= self.n_domains {
                return Err(manifest_err(
                    "domain_id",
                    sid,
                    format!("{} not below n_domains = {}", s.domain_id, self.n_domains),
                ));
            }
            match s.split {
                Split::Train if !self.seen_class_ids.contains(&s.class_id) => {
                    return Err(manifest_err("class_id", sid, "train sample carries an unseen class"));
                }
                Split::Train if !self.seen_domain_ids.contains(&s.domain_id) => {
                    return Err(manifest_err("domain_id", sid, "train sample comes from an unseen domain"));
                }
                Split::TestQuery if self.seen_domain_ids.contains(&s.domain_id) => {
                    return Err(manifest_err("domain_id", sid, "query sample comes from a training domain"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn is_seen_class(&self, class_id: usize) -> bool {
        self.seen_class_ids.contains(&class_id)
    }

    pub fn unseen_class_ids(&self) -> Vec<usize> {
        (0..self.n_classes).filter(|c| !self.is_seen_class(*c)).collect()
    }
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Parses and validates a manifest and checks that every image exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| manifest_err("json", None, e.to_string()))?;
    manifest.validate()?;
    let root = manifest_root(path);
    for s in &manifest.samples {
        let p = root.join(&s.path);
        if !p.is_file() {
            return Err(Error::MissingImage { path: p });
        }
    }
    Ok(manifest)
}

pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Decodes the images of one split.
pub fn load_split(manifest: &DatasetManifest, root: impl AsRef<Path>, split: Split) -> Result<Vec<ImageSample>> {
    let root = root.as_ref();
    manifest
        .records(split)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|r| {
            let img = read_ppm(root.join(&r.path))?;
            Ok(ImageSample::new(r.id.clone(), img, r.class_id, r.domain_id, r.split))
        })
        .collect()
}
