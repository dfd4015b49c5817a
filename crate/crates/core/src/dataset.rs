//! Dataset ingestion: label-per-subdirectory image folders (used for POOD
//! data and evaluation sets) and the CIFAR-10 binary format.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::concept::normalize_concept;
use crate::error::{Error, Result};
use crate::images::{load_image, ImageSet, Shape3};
use crate::synthetic::CIFAR10_CLASSES;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "ppm"];

#[derive(Debug, Clone)]
pub struct PoodDataset {
    pub root: PathBuf,
    /// `(path, label index)` for every decoded image, in load order.
    pub items: Vec<(PathBuf, usize)>,
    /// Concept name per label index.
    pub labels: Vec<String>,
    pub images: ImageSet,
    /// Files that looked like images but failed to decode.
    pub skipped: usize,
    /// Subdirectories removed by the exclusion list.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FolderOptions {
    /// Concept names whose subdirectories are dropped (compared after
    /// lowercasing and collapsing separators).
    pub exclude: Vec<String>,
    /// Keep at most this many images per label (first in path order).
    pub max_per_class: Option<usize>,
    /// Optional `dir_name<TAB>concept name` file mapping subdirectory names
    /// (for example WordNet ids) to concept names; the first comma-separated
    /// synonym is used.
    pub names_file: Option<PathBuf>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else if is_image(&p) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_names(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let (k, v) = l.split_once('\t')?;
            let name = v.split(',').next()?.trim();
            (!name.is_empty()).then(|| (k.trim().to_string(), name.to_string()))
        })
        .collect())
}

/// Loads `root/<label>/**/<image>` with labels sorted lexicographically by
/// subdirectory name. Images are resized to `shape`.
pub fn load_folder(root: &Path, shape: Shape3, opts: &FolderOptions) -> Result<PoodDataset> {
    let names = match &opts.names_file {
        Some(p) => read_names(p)?,
        None => HashMap::new(),
    };
    let mut dirs: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    dirs.sort();
    let excluded_keys: Vec<String> = opts.exclude.iter().map(|s| normalize_concept(s)).collect();
    let mut labels = Vec::new();
    let mut excluded = Vec::new();
    let mut items = Vec::new();
    let mut images = ImageSet::empty(shape);
    let mut skipped = 0usize;
    for dir in dirs {
        let concept = names.get(&dir).cloned().unwrap_or_else(|| dir.clone());
        if excluded_keys.contains(&normalize_concept(&concept)) {
            excluded.push(dir);
            continue;
        }
        let label = labels.len();
        let mut files = Vec::new();
        collect_files(&root.join(&dir), &mut files)?;
        let mut kept = 0usize;
        for f in files {
            if opts.max_per_class.is_some_and(|m| kept >= m) {
                break;
            }
            match load_image(&f, shape) {
                Ok(img) => {
                    images.push(&img, label)?;
                    items.push((f, label));
                    kept += 1;
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
        labels.push(concept);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} undecodable files under {}", root.display());
    }
    Ok(PoodDataset {
        root: root.to_path_buf(),
        items,
        labels,
        images,
        skipped,
        excluded,
    })
}

/// Loads a folder that either holds label subdirectories or image files
/// directly; in the flat case every image gets label 0.
pub fn load_images(root: &Path, shape: Shape3) -> Result<ImageSet> {
    let has_dirs = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().is_dir());
    if has_dirs {
        return Ok(load_folder(root, shape, &FolderOptions::default())?.images);
    }
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    let mut set = ImageSet::empty(shape);
    for f in files {
        match load_image(&f, shape) {
            Ok(img) => set.push(&img, 0)?,
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    Ok(set)
}

/// [`load_folder`] that insists on at least one decodable image.
pub fn ingest_pood(root: &Path, shape: Shape3, opts: &FolderOptions) -> Result<PoodDataset> {
    let ds = load_folder(root, shape, opts)?;
    if ds.images.is_empty() {
        return Err(Error::UnusablePood(format!(
            "no decodable images under {} ({} skipped)",
            root.display(),
            ds.skipped
        )));
    }
    Ok(ds)
}

/// Reorders folder labels to match `class_names` (by normalized name) so
/// label indices agree with a victim's output order.
pub fn align_labels(ds: &PoodDataset, class_names: &[String]) -> Result<ImageSet> {
    let keys: Vec<String> = class_names.iter().map(|s| normalize_concept(s)).collect();
    let remap: Vec<usize> = ds
        .labels
        .iter()
        .map(|l| {
            keys.iter()
                .position(|k| *k == normalize_concept(l))
                .ok_or_else(|| Error::ConceptSet(format!("folder label {l:?} is not a victim class")))
        })
        .collect::<Result<_>>()?;
    let mut out = ImageSet::empty(ds.images.shape());
    for i in 0..ds.images.len() {
        out.push(ds.images.image(i), remap[ds.images.label(i)])?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary batches (`data_batch_{1..5}.bin` or
/// `test_batch.bin`) under `dir`. Returns images and class names.
pub fn load_cifar10(dir: &Path, split: Split, limit: Option<usize>) -> Result<(ImageSet, Vec<String>)> {
    let files: Vec<PathBuf> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut set = ImageSet::empty([3, 32, 32]);
    'files: for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!("{}: length is not a multiple of {CIFAR_RECORD}", f.display())));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if limit.is_some_and(|l| set.len() >= l) {
                break 'files;
            }
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format(format!("{}: label {label} out of range", f.display())));
            }
            let img: Vec<f32> = rec[1..].iter().map(|b| *b as f32 / 255.0).collect();
            set.push(&img, label)?;
        }
    }
    let meta = dir.join("batches.meta.txt");
    let names = match fs::read_to_string(&meta) {
        Ok(t) => t.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect(),
        Err(_) => CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    };
    Ok((set, names))
}
