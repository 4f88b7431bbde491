// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset manifests (JSON Lines), region masks, image shards and class
//! prototype files.
//!
//! On disk a dataset called `stem` is three files in one directory:
//!
//! - `stem.jsonl`, one [`ManifestEntry`] per line:
//!   `{"id":"t00003","tensor_path":"stem.safetensors","y_image":2,"y_typo":5,"mask":[56,57],"tokens":64}`
//!   (`y_typo` is omitted for clean samples, `mask` lists flagged token
//!   indices and is empty for clean samples);
//! - `stem.classes.json`: `{"class_names":[...],"typo_class_names":[...]}`;
//! - `stem.safetensors`: image tensors `[3, H, W]` named `img.{id}`.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, Metadata, TensorMap};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Indicator over the spatial tokens marking typographic content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    flags: Vec<bool>,
}

impl RegionMask {
    pub fn empty(tokens: usize) -> Self {
        Self {
            flags: vec![false; tokens],
        }
    }

    pub fn from_indices(tokens: usize, indices: &[usize]) -> Result<Self> {
        let mut flags = vec![false; tokens];
        for &i in indices {
            *flags
                .get_mut(i)
                .ok_or_else(|| Error::invalid(format!("mask index {i} >= {tokens} tokens")))? =
                true;
        }
        Ok(Self { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn tokens(&self) -> usize {
        self.flags.len()
    }

    /// Number of flagged tokens.
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub tensor_path: String,
    pub y_image: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_typo: Option<usize>,
    pub mask: Vec<usize>,
    pub tokens: usize,
}

impl ManifestEntry {
    pub fn region_mask(&self) -> Result<RegionMask> {
        RegionMask::from_indices(self.tokens, &self.mask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassFile {
    class_names: Vec<String>,
    typo_class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
    pub typo_class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", e.id)));
            }
            if e.y_image >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "sample `{}`: y_image {} outside {} classes",
                    e.id,
                    e.y_image,
                    self.class_names.len()
                )));
            }
            let mask = e.region_mask()?;
            match e.y_typo {
                Some(t) if t >= self.typo_class_names.len() => {
                    return Err(Error::invalid(format!(
                        "sample `{}`: y_typo {t} outside {} typo classes",
                        e.id,
                        self.typo_class_names.len()
                    )))
                }
                Some(_) if mask.is_empty() => {
                    return Err(Error::invalid(format!(
                        "sample `{}` has y_typo but an empty mask",
                        e.id
                    )))
                }
                None if !mask.is_empty() => {
                    return Err(Error::invalid(format!(
                        "sample `{}` has a mask but no y_typo",
                        e.id
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Reads `stem.jsonl` and its `stem.classes.json` companion.
    pub fn read(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), lineno + 1), e))?;
            entries.push(entry);
        }
        let classes_path = classes_path(path);
        let text =
            std::fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        let classes: ClassFile = serde_json::from_str(&text)
            .map_err(|e| Error::json(classes_path.display().to_string(), e))?;
        let m = Self {
            entries,
            class_names: classes.class_names,
            typo_class_names: classes.typo_class_names,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::json("manifest entry", e))?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))?;
        let classes = ClassFile {
            class_names: self.class_names.clone(),
            typo_class_names: self.typo_class_names.clone(),
        };
        let cp = classes_path(path);
        let text =
            serde_json::to_string_pretty(&classes).map_err(|e| Error::json("class file", e))?;
        std::fs::write(&cp, text).map_err(|e| Error::io(&cp, e))
    }
}

fn classes_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("classes.json")
}

/// A manifest together with its images, in entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::invalid(format!(
                "{} manifest entries but {} images",
                manifest.len(),
                images.len()
            )));
        }
        manifest.validate()?;
        Ok(Self { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.manifest.entries
    }

    /// Loads the manifest at `path` and every image it references.
    /// `tensor_path` is resolved relative to the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut shards: BTreeMap<String, TensorMap> = BTreeMap::new();
        let mut images = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            if !shards.contains_key(&e.tensor_path) {
                let (map, _) = container::read_tensors(&dir.join(&e.tensor_path))?;
                shards.insert(e.tensor_path.clone(), map);
            }
            let name = format!("img.{}", e.id);
            let img = shards[&e.tensor_path]
                .get(&name)
                .ok_or_else(|| Error::MissingTensor(format!("{} in {}", name, e.tensor_path)))?;
            images.push(img.clone());
        }
        Self::new(manifest, images)
    }

    /// Writes `stem.jsonl`, `stem.classes.json` and a single
    /// `stem.safetensors` shard into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shard = format!("{stem}.safetensors");
        let mut manifest = self.manifest.clone();
        let mut map = TensorMap::new();
        for (e, img) in manifest.entries.iter_mut().zip(&self.images) {
            e.tensor_path = shard.clone();
            map.insert(format!("img.{}", e.id), img.clone());
        }
        container::write_tensors(&dir.join(&shard), &map, &Metadata::new())?;
        let path = dir.join(format!("{stem}.jsonl"));
        manifest.write(&path)?;
        Ok(path)
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                entries: indices.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
                class_names: self.manifest.class_names.clone(),
                typo_class_names: self.manifest.typo_class_names.clone(),
            },
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    /// Class-balanced subsample: `ceil(fraction · n_c)` samples drawn per
    /// image class with a seeded shuffle, returned in original order.
    pub fn balanced_subset(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
        }
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.manifest.entries.iter().enumerate() {
            by_class.entry(e.y_image).or_default().push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for idx in by_class.values_mut() {
            idx.shuffle(&mut rng);
            let n = ((fraction * idx.len() as f64).ceil() as usize).min(idx.len());
            keep.extend_from_slice(&idx[..n]);
        }
        keep.sort_unstable();
        Ok(self.select(&keep))
    }
}

/// Class text embeddings used for zero-shot classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    /// `[classes, e]`, unit rows.
    pub matrix: Tensor,
    pub class_names: Vec<String>,
}

impl ClassPrototypes {
    /// Normalizes each row to unit length.
    pub fn new(rows: &[Vec<f32>], class_names: Vec<String>) -> Result<Self> {
        if rows.len() != class_names.len() {
            return Err(Error::invalid(format!(
                "{} prototype rows for {} class names",
                rows.len(),
                class_names.len()
            )));
        }
        let normed: Vec<Vec<f32>> = rows.iter().map(|r| tensor::l2_normalize(r)).collect();
        let matrix = Tensor::from_rows(&normed)?;
        matrix.check_finite("prototypes")?;
        Ok(Self {
            matrix,
            class_names,
        })
    }

    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn width(&self) -> usize {
        self.matrix.cols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut map = TensorMap::new();
        map.insert("prototypes".into(), self.matrix.clone());
        let mut meta = Metadata::new();
        meta.insert(
            "class_names".into(),
            serde_json::to_string(&self.class_names).map_err(|e| Error::json("class names", e))?,
        );
        container::write_tensors(path, &map, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut map, meta) = container::read_tensors(path)?;
        let matrix = map
            .remove("prototypes")
            .ok_or_else(|| Error::MissingTensor("prototypes".into()))?;
        if matrix.ndim() != 2 {
            return Err(Error::TensorShape {
                name: "prototypes".into(),
                expected: vec![0, 0],
                got: matrix.shape().to_vec(),
            });
        }
        let class_names = match meta.get("class_names") {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::json("class_names", e))?,
            None => (0..matrix.rows()).map(|i| format!("class_{i}")).collect(),
        };
        let rows: Vec<Vec<f32>> = (0..matrix.rows()).map(|i| matrix.row(i).to_vec()).collect();
        for (i, r) in rows.iter().enumerate() {
            let n = tensor::dot(r, r).sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::invalid(format!("prototype row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            matrix,
            class_names,
        })
    }
}
