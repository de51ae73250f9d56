//! Dataset discovery, stratified splitting and batch loading.
//!
//! Datasets are laid out one directory per class:
//! `<root>/<class_name>/<image files>`. Scanning sorts everything
//! lexicographically before the seeded split, so a manifest depends only on
//! `(seed, fractions, file listing)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageReader, RgbImage};
use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default seed for the stratified split.
pub const DEFAULT_SPLIT_SEED: u64 = 13;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset root {root:?} is unreadable: {source}")]
    UnreadableRoot {
        root: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset needs at least 2 class directories with images, found {found}")]
    EmptyDataset { found: usize },
    #[error("invalid split fractions {0:?}: must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),
    #[error("corrupt image {sample_id}: {reason}")]
    CorruptImage { sample_id: String, reason: String },
    #[error("index {index} out of range for {split} split of {len} samples")]
    IndexOutOfRange { split: Split, index: usize, len: usize },
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventClass {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    /// Path relative to the dataset root, `/`-separated.
    pub sample_id: String,
    pub class: usize,
    pub split: Split,
}

/// Train/val/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let all = [train, val, test];
        let valid = all.iter().all(|f| f.is_finite() && *f >= 0.0)
            && (train + val + test - 1.0).abs() < 1e-9;
        if !valid {
            return Err(DatasetError::InvalidFractions(all));
        }
        Ok(Self { train, val, test })
    }

    /// Per-split counts for `n` samples. Train and val are rounded, test takes
    /// the remainder, so each count is within one sample of `n * fraction`.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let train = ((n as f64 * self.train).round() as usize).min(n);
        let val = ((n as f64 * self.val).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, val: 0.15, test: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<EventClass>,
    pub samples: Vec<Sample>,
    pub seed: u64,
    pub split_fractions: SplitFractions,
    /// Resampling applied by [`load_batch`] when images are brought to the
    /// model input size.
    pub resize: String,
    /// Files inside class directories that were not decodable images.
    pub skipped_files: usize,
}

impl DatasetManifest {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_by_name(&self, name: &str) -> Option<&EventClass> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Samples of one split, in manifest order.
    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }

    pub fn sample_path(&self, sample: &Sample) -> PathBuf {
        self.root.join(&sample.sample_id)
    }

    /// Canonical JSON encoding. Two equal manifests encode to identical bytes.
    pub fn to_json(&self) -> Result<String, DatasetError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn is_decodable(path: &Path) -> bool {
    has_image_extension(path)
        && ImageReader::open(path)
            .and_then(|r| r.with_guessed_format())
            .map(|r| r.into_dimensions().is_ok())
            .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?;
    entries.sort();
    Ok(entries)
}

/// Builds a manifest of every decodable image under `root`.
pub fn scan(
    root: &Path,
    seed: u64,
    fractions: SplitFractions,
) -> Result<DatasetManifest, DatasetError> {
    let unreadable = |source| DatasetError::UnreadableRoot { root: root.to_path_buf(), source };
    let entries = sorted_entries(root).map_err(unreadable)?;

    let mut classes = Vec::new();
    let mut per_class: Vec<Vec<String>> = Vec::new();
    let mut skipped = 0;
    for dir in entries.iter().filter(|p| p.is_dir()) {
        let Some(name) = dir.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if name.starts_with('.') {
            continue;
        }
        let mut ids = Vec::new();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let file_name = file.file_name().and_then(|n| n.to_str());
            match file_name {
                Some(f) if is_decodable(&file) => ids.push(format!("{name}/{f}")),
                _ => skipped += 1,
            }
        }
        if ids.is_empty() {
            continue;
        }
        classes.push(EventClass { id: classes.len(), name: name.to_string() });
        per_class.push(ids);
    }
    if classes.len() < 2 {
        return Err(DatasetError::EmptyDataset { found: classes.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for (class, ids) in per_class.into_iter().enumerate() {
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.shuffle(&mut rng);
        let [n_train, n_val, _] = fractions.counts(ids.len());
        let mut splits = vec![Split::Test; ids.len()];
        for (rank, &idx) in order.iter().enumerate() {
            splits[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        samples.extend(
            ids.into_iter()
                .zip(splits)
                .map(|(sample_id, split)| Sample { sample_id, class, split }),
        );
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        samples,
        seed,
        split_fractions: fractions,
        resize: "bilinear".to_string(),
        skipped_files: skipped,
    })
}

/// Linear map of an 8-bit channel value onto `[-1, 1]`.
#[inline]
pub fn normalize_pixel(v: f32) -> f32 {
    v / 127.5 - 1.0
}

/// Converts an RGB image into an `H x W x 3` tensor in `[-1, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        normalize_pixel(img.get_pixel(x as u32, y as u32)[c] as f32)
    })
}

/// Resizes (bilinear, no aspect-preserving crop) to a square input.
pub fn resize_to_input(img: &RgbImage, input_size: u32) -> RgbImage {
    if img.dimensions() == (input_size, input_size) {
        img.clone()
    } else {
        image::imageops::resize(img, input_size, input_size, FilterType::Triangle)
    }
}

pub fn open_rgb(path: &Path) -> Result<RgbImage, String> {
    ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

/// Decodes, resizes and normalizes one image file.
pub fn load_image_tensor(path: &Path, input_size: u32) -> Result<Array3<f32>, String> {
    let img = open_rgb(path)?;
    Ok(image_to_tensor(&resize_to_input(&img, input_size)))
}

/// Loads samples `indices` of `split` as a `B x S x S x 3` tensor in
/// `[-1, 1]`, with labels aligned positionally.
pub fn load_batch(
    manifest: &DatasetManifest,
    split: Split,
    indices: &[usize],
    input_size: u32,
) -> Result<(Array4<f32>, Vec<usize>), DatasetError> {
    let pool = manifest.split_samples(split);
    let chosen = indices
        .iter()
        .map(|&index| {
            pool.get(index)
                .copied()
                .ok_or(DatasetError::IndexOutOfRange { split, index, len: pool.len() })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let images = chosen
        .par_iter()
        .map(|s| {
            load_image_tensor(&manifest.sample_path(s), input_size).map_err(|reason| {
                DatasetError::CorruptImage { sample_id: s.sample_id.clone(), reason }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let size = input_size as usize;
    let mut batch = Array4::<f32>::zeros((images.len(), size, size, 3));
    for (mut slot, img) in batch.axis_iter_mut(Axis(0)).zip(&images) {
        slot.assign(img);
    }
    Ok((batch, chosen.iter().map(|s| s.class).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn write_png(path: &Path, value: u8) {
        RgbImage::from_pixel(8, 6, Rgb([value, value, value])).save(path).unwrap();
    }

    fn make_dataset(classes: &[(&str, usize)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, n) in classes {
            let class_dir = dir.path().join(name);
            fs::create_dir(&class_dir).unwrap();
            for i in 0..*n {
                write_png(&class_dir.join(format!("img_{i:03}.png")), (i * 2) as u8);
            }
        }
        dir
    }

    #[test]
    fn pixel_map_endpoints() {
        assert_eq!(normalize_pixel(0.0), -1.0);
        assert_eq!(normalize_pixel(255.0), 1.0);
        assert_eq!(normalize_pixel(127.5), 0.0);
    }

    #[test]
    fn six_class_dirs_give_six_classes() {
        let names = ["concert", "graduation", "mountain trip", "picnic", "sea holiday", "ski holiday"];
        let spec: Vec<_> = names.iter().map(|n| (*n, 3)).collect();
        let dir = make_dataset(&spec);
        let m = scan(dir.path(), DEFAULT_SPLIT_SEED, SplitFractions::default()).unwrap();
        assert_eq!(m.classes.len(), 6);
        assert_eq!(m.class_names(), names);
        assert!(m.classes.iter().enumerate().all(|(i, c)| c.id == i));
    }

    #[test]
    fn hundred_per_class_splits_70_15_15() {
        let dir = make_dataset(&[("a", 100), ("b", 100)]);
        let m = scan(dir.path(), 7, SplitFractions::default()).unwrap();
        for class in 0..2 {
            let count = |split| {
                m.samples.iter().filter(|s| s.class == class && s.split == split).count()
            };
            assert_eq!(
                [count(Split::Train), count(Split::Val), count(Split::Test)],
                [70, 15, 15]
            );
        }
    }

    #[test]
    fn rescanning_is_byte_identical() {
        let dir = make_dataset(&[("a", 11), ("b", 7), ("c", 5)]);
        let a = scan(dir.path(), 3, SplitFractions::default()).unwrap();
        let b = scan(dir.path(), 3, SplitFractions::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn non_images_are_skipped_and_counted() {
        let dir = make_dataset(&[("a", 2), ("b", 2)]);
        fs::write(dir.path().join("a/notes.txt"), "hello").unwrap();
        fs::write(dir.path().join("b/broken.png"), "not a png").unwrap();
        let m = scan(dir.path(), 1, SplitFractions::default()).unwrap();
        assert_eq!(m.samples.len(), 4);
        assert_eq!(m.skipped_files, 2);
    }

    #[test]
    fn fewer_than_two_classes_is_empty_dataset() {
        let dir = make_dataset(&[("only", 3)]);
        let err = scan(dir.path(), 1, SplitFractions::default()).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyDataset { found: 1 }));
    }

    #[test]
    fn missing_root_is_unreadable() {
        let err = scan(Path::new("/definitely/not/here"), 1, SplitFractions::default())
            .unwrap_err();
        assert!(matches!(err, DatasetError::UnreadableRoot { .. }));
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(SplitFractions::new(0.5, 0.5, 0.5).is_err());
        assert!(SplitFractions::new(-0.1, 0.6, 0.5).is_err());
        assert!(SplitFractions::new(0.8, 0.1, 0.1).is_ok());
    }

    #[test]
    fn batch_shape_labels_and_range() {
        let dir = make_dataset(&[("a", 4), ("b", 4)]);
        let m = scan(dir.path(), 1, SplitFractions::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        let (batch, labels) = load_batch(&m, Split::Train, &[0, 5, 7], 16).unwrap();
        assert_eq!(batch.shape(), &[3, 16, 16, 3]);
        assert_eq!(labels, vec![0, 1, 1]);
        assert!(batch.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn batch_index_out_of_range() {
        let dir = make_dataset(&[("a", 2), ("b", 2)]);
        let m = scan(dir.path(), 1, SplitFractions::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        let err = load_batch(&m, Split::Train, &[4], 8).unwrap_err();
        assert!(matches!(err, DatasetError::IndexOutOfRange { index: 4, len: 4, .. }));
    }

    #[test]
    fn corrupt_image_names_the_sample() {
        let dir = make_dataset(&[("a", 2), ("b", 2)]);
        let m = scan(dir.path(), 1, SplitFractions::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        fs::write(dir.path().join("a/img_000.png"), b"\x89PNG garbage").unwrap();
        let err = load_batch(&m, Split::Train, &[0], 8).unwrap_err();
        match err {
            DatasetError::CorruptImage { sample_id, .. } => assert_eq!(sample_id, "a/img_000.png"),
            other => panic!("unexpected {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_counts_stay_within_one(n in 0usize..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
                let (train, val) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
                let f = SplitFractions::new(train, val, 1.0 - train - val).unwrap();
                let counts = f.counts(n);
                prop_assert_eq!(counts.iter().sum::<usize>(), n);
                for (c, frac) in counts.iter().zip([f.train, f.val, f.test]) {
                    prop_assert!((*c as f64 - n as f64 * frac).abs() <= 1.0 + 1e-9);
                }
            }
        }
    }
}
