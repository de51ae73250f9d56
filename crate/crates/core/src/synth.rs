//! Synthetic three-class shape dataset (circle / square / triangle) with
//! ground-truth bounding boxes, written in the class-per-directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];
pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDatasetSpec {
    pub per_class: usize,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for ShapeDatasetSpec {
    fn default() -> Self {
        Self { per_class: 100, image_size: 64, seed: 7 }
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BoundingBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeAnnotation {
    pub class: String,
    pub bbox: BoundingBox,
}

/// Sample id (`class/file.png`) to annotation.
pub type Annotations = BTreeMap<String, ShapeAnnotation>;

fn inside(class: usize, px: f64, py: f64, cx: f64, cy: f64, size: f64) -> bool {
    match class {
        0 => (px - cx).powi(2) + (py - cy).powi(2) <= size * size,
        1 => (px - cx).abs() <= size / 2.0 && (py - cy).abs() <= size / 2.0,
        _ => {
            // Equilateral, apex up, centred on its bounding box.
            let h = size * 3f64.sqrt() / 2.0;
            let top = cy - h / 2.0;
            let t = (py - top) / h;
            (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * size / 2.0
        }
    }
}

/// Renders one bright shape on a dark noisy background.
pub fn render_shape(class: usize, image_size: u32, rng: &mut impl Rng) -> (RgbImage, BoundingBox) {
    let s = image_size as f64;
    let size = match class {
        0 => rng.random_range(0.14..0.23) * s,
        1 => rng.random_range(0.25..0.44) * s,
        _ => rng.random_range(0.32..0.50) * s,
    };
    let half_extent = if class == 0 { size } else { size / 2.0 };
    let margin = half_extent + 4.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..50.0));
    let fg: [u8; 3] = std::array::from_fn(|_| rng.random_range(170..=255));
    let mut img = RgbImage::new(image_size, image_size);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..image_size {
        for x in 0..image_size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let pixel = if inside(class, px, py, cx, cy, size) {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
                fg
            } else {
                std::array::from_fn(|c| (bg[c] + rng.random_range(-12.0..12.0)).clamp(0.0, 255.0) as u8)
            };
            img.put_pixel(x, y, Rgb(pixel));
        }
    }
    (img, BoundingBox { x0, y0, x1, y1 })
}

/// Writes `per_class` images per shape under `root` plus an annotation file
/// with each shape's bounding box.
pub fn generate_shapes(root: &Path, spec: &ShapeDatasetSpec) -> io::Result<Annotations> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut annotations = Annotations::new();
    for (class, name) in SHAPE_CLASSES.iter().enumerate() {
        fs::create_dir_all(root.join(name))?;
        for i in 0..spec.per_class {
            let (img, bbox) = render_shape(class, spec.image_size, &mut rng);
            let sample_id = format!("{name}/{name}_{i:03}.png");
            img.save(root.join(&sample_id)).map_err(io::Error::other)?;
            annotations.insert(sample_id, ShapeAnnotation { class: name.to_string(), bbox });
        }
    }
    fs::write(root.join(ANNOTATIONS_FILE), serde_json::to_vec_pretty(&annotations)?)?;
    Ok(annotations)
}

pub fn load_annotations(root: &Path) -> io::Result<Annotations> {
    Ok(serde_json::from_slice(&fs::read(root.join(ANNOTATIONS_FILE))?)?)
}
