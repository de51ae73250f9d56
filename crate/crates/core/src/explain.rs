//! Class activation maps (Grad-CAM and CAM) and heatmap overlays.
//!
//! Every method reduces to per-channel weights over the target-layer
//! activation volume. The shared tail is identical for all methods:
//! `ReLU(sum_k alpha_k A^k)`, division by the maximum, bilinear upsampling to
//! the model input size.

use std::collections::BTreeMap;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::model::{ForwardTrace, ModelBundle, ModelError};
use crate::nn::{self, Head};

/// Default overlay opacity of the heatmap.
pub const DEFAULT_BLEND_ALPHA: f64 = 0.4;

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("class {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("non-finite gradient at layer {layer}")]
    NonFiniteGradient { layer: String },
    #[error("CAM needs global average pooling + one dense layer directly after layer {layer}")]
    UnsupportedHead { layer: String },
    #[error("unknown explanation method {name:?}; available: {available:?}")]
    UnknownMethod { name: String, available: Vec<String> },
    #[error("blend alpha must lie in (0, 1), got {0}")]
    Param(f64),
    #[error("image is {image:?} but map is {map:?}")]
    SizeMismatch { image: (u32, u32), map: (u32, u32) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("export: {0}")]
    Io(#[from] std::io::Error),
    #[error("export: {0}")]
    Image(#[from] image::ImageError),
}

/// Activations `A^k` captured at the target layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVolume {
    pub values: Array3<f64>,
    pub layer_name: String,
}

/// One weight per feature map for a target class.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub alpha: Vec<f64>,
    pub target_class: usize,
}

/// Relevance grid in `[0, 1]`; the maximum is 1 unless the map is all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    /// `H x W`, row-major.
    pub grid: Array2<f64>,
    pub target_class: usize,
    pub method: String,
    pub layer_name: String,
    /// Maximum of the rectified weighted sum before normalization.
    pub raw_max: f64,
}

/// Strategy producing channel weights for a class.
pub trait ExplanationMethod: Send + Sync {
    fn name(&self) -> &str;
    fn channel_weights(
        &self,
        bundle: &ModelBundle,
        trace: &ForwardTrace,
        target_class: usize,
    ) -> Result<ChannelWeights, ExplainError>;
}

/// What the Grad-CAM gradient is taken of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradObjective {
    /// The pre-softmax class score `y^c`.
    ClassScore,
    /// The log-probability of the class, i.e. the negated cross-entropy loss.
    NegativeLoss,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCam {
    pub objective: GradObjective,
}

impl GradCam {
    pub const fn class_score() -> Self {
        Self { objective: GradObjective::ClassScore }
    }

    pub const fn loss() -> Self {
        Self { objective: GradObjective::NegativeLoss }
    }
}

/// Gradient of the chosen objective with respect to the target activation.
pub fn target_gradient(
    bundle: &ModelBundle,
    trace: &ForwardTrace,
    target_class: usize,
    objective: GradObjective,
) -> Array3<f64> {
    let logits = trace.logits();
    let dlogits: Vec<f64> = match objective {
        GradObjective::ClassScore => (0..logits.len()).map(|i| f64::from(u8::from(i == target_class))).collect(),
        GradObjective::NegativeLoss => {
            let (_, g) = nn::cross_entropy(logits, target_class);
            g.into_iter().map(|v| -v).collect()
        }
    };
    let grad = bundle.head.backward(trace.features().dim(), &trace.head, &dlogits, None);
    bundle.backbone.backward_to(&trace.backbone, grad, bundle.target_index() + 1, None)
}

impl ExplanationMethod for GradCam {
    fn name(&self) -> &str {
        match self.objective {
            GradObjective::ClassScore => "gradcam",
            GradObjective::NegativeLoss => "gradcam-loss",
        }
    }

    fn channel_weights(
        &self,
        bundle: &ModelBundle,
        trace: &ForwardTrace,
        target_class: usize,
    ) -> Result<ChannelWeights, ExplainError> {
        let grad = target_gradient(bundle, trace, target_class, self.objective);
        let (h, w, _) = grad.dim();
        let z = (h * w) as f64;
        let alpha = grad.sum_axis(Axis(0)).sum_axis(Axis(0)).mapv(|s| s / z).to_vec();
        Ok(ChannelWeights { alpha, target_class })
    }
}

/// Dense-layer weights of the class, valid only for GAP + dense heads on the
/// final activation.
#[derive(Debug, Clone, Copy)]
pub struct Cam;

impl ExplanationMethod for Cam {
    fn name(&self) -> &str {
        "cam"
    }

    fn channel_weights(
        &self,
        bundle: &ModelBundle,
        _trace: &ForwardTrace,
        target_class: usize,
    ) -> Result<ChannelWeights, ExplainError> {
        let last = bundle.backbone.layers.len() - 1;
        match &bundle.head {
            Head::GapDense { dense } if bundle.target_index() == last => Ok(ChannelWeights {
                alpha: (0..dense.in_dim).map(|k| dense.w(k, target_class)).collect(),
                target_class,
            }),
            _ => Err(ExplainError::UnsupportedHead { layer: bundle.target_layer().to_string() }),
        }
    }
}

#[derive(Default)]
pub struct ExplainerRegistry {
    methods: BTreeMap<String, Box<dyn ExplanationMethod>>,
}

impl ExplainerRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self::default();
        r.register(GradCam::class_score());
        r.register(GradCam::loss());
        r.register(Cam);
        r
    }

    pub fn register<M: ExplanationMethod + 'static>(&mut self, method: M) {
        self.methods.insert(method.name().to_string(), Box::new(method));
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn ExplanationMethod, ExplainError> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| ExplainError::UnknownMethod {
            name: name.to_string(),
            available: self.names(),
        })
    }
}

/// `ReLU(sum_k alpha_k A^k)` over the spatial grid.
pub fn weighted_map(volume: &Array3<f64>, alpha: &[f64]) -> Array2<f64> {
    let (h, w, _) = volume.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let pixel = volume.slice(ndarray::s![y, x, ..]);
        pixel.iter().zip(alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0)
    })
}

/// Scales a non-negative map so its maximum is 1; an all-zero map stays zero.
pub fn normalize(raw: &Array2<f64>) -> Array2<f64> {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        raw.mapv(|v| v / max)
    } else {
        Array2::zeros(raw.dim())
    }
}

/// Bilinear resampling with pixel-centre alignment. Same-size input is
/// returned unchanged.
pub fn upsample_bilinear(grid: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = grid.dim();
    if (h, w) == (height, width) {
        return grid.clone();
    }
    let source = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = source(y, height, h);
        let (x0, x1, fx) = source(x, width, w);
        let top = grid[[y0, x0]] * (1.0 - fx) + grid[[y0, x1]] * fx;
        let bottom = grid[[y1, x0]] * (1.0 - fx) + grid[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Captures the target-layer activations of one image.
pub fn activation_volume(bundle: &ModelBundle, trace: &ForwardTrace) -> ActivationVolume {
    ActivationVolume {
        values: trace.backbone[bundle.target_index() + 1].clone(),
        layer_name: bundle.target_layer().to_string(),
    }
}

/// Runs `method` for `target_class` on one normalized input image.
pub fn explain(
    bundle: &ModelBundle,
    image: ArrayView3<f32>,
    target_class: usize,
    method: &dyn ExplanationMethod,
) -> Result<ActivationMap, ExplainError> {
    let classes = bundle.config.num_classes;
    if target_class >= classes {
        return Err(ExplainError::UnknownClass { class: target_class, classes });
    }
    let trace = bundle.trace(image)?;
    let weights = method.channel_weights(bundle, &trace, target_class)?;
    let layer = bundle.target_layer().to_string();
    if weights.alpha.iter().any(|a| !a.is_finite()) {
        return Err(ExplainError::NonFiniteGradient { layer });
    }
    let volume = activation_volume(bundle, &trace);
    let raw = weighted_map(&volume.values, &weights.alpha);
    let raw_max = raw.iter().copied().fold(0.0, f64::max);
    let size = bundle.config.input_size as usize;
    Ok(ActivationMap {
        grid: upsample_bilinear(&normalize(&raw), size, size),
        target_class,
        method: method.name().to_string(),
        layer_name: layer,
        raw_max,
    })
}

pub fn grad_cam(
    bundle: &ModelBundle,
    image: ArrayView3<f32>,
    target_class: usize,
) -> Result<ActivationMap, ExplainError> {
    explain(bundle, image, target_class, &GradCam::class_score())
}

pub fn cam(
    bundle: &ModelBundle,
    image: ArrayView3<f32>,
    target_class: usize,
) -> Result<ActivationMap, ExplainError> {
    explain(bundle, image, target_class, &Cam)
}

/// Metadata written next to an exported map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub method: String,
    pub target_class: usize,
    pub class_name: Option<String>,
    pub layer_name: String,
    pub pre_normalization_max: f64,
    pub width: u32,
    pub height: u32,
}

impl ActivationMap {
    pub fn width(&self) -> u32 {
        self.grid.ncols() as u32
    }

    pub fn height(&self) -> u32 {
        self.grid.nrows() as u32
    }

    /// Row-major position of the largest entry (first on ties).
    pub fn peak(&self) -> (u32, u32) {
        let mut best = (0, 0);
        for ((y, x), &v) in self.grid.indexed_iter() {
            if v > self.grid[[best.1, best.0]] {
                best = (x, y);
            }
        }
        (best.0 as u32, best.1 as u32)
    }

    pub fn resized(&self, width: u32, height: u32) -> Self {
        Self { grid: upsample_bilinear(&self.grid, height as usize, width as usize), ..self.clone() }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width(), self.height(), |x, y| {
            Luma([(self.grid[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn sidecar(&self, class_name: Option<&str>) -> MapSidecar {
        MapSidecar {
            method: self.method.clone(),
            target_class: self.target_class,
            class_name: class_name.map(str::to_string),
            layer_name: self.layer_name.clone(),
            pre_normalization_max: self.raw_max,
            width: self.width(),
            height: self.height(),
        }
    }

    /// Writes the 8-bit grayscale PNG and its JSON sidecar.
    pub fn export(&self, png: &Path, json: &Path, class_name: Option<&str>) -> Result<(), ExplainError> {
        self.to_gray_image().save(png)?;
        std::fs::write(json, serde_json::to_vec_pretty(&self.sidecar(class_name)).expect("sidecar"))?;
        Ok(())
    }
}

const COLORMAP_STOPS: [[f64; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Blue to red colormap through cyan, green and yellow; returns RGB in `[0, 255]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let t = v.clamp(0.0, 1.0) * (COLORMAP_STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(COLORMAP_STOPS.len() - 2);
    let f = t - i as f64;
    std::array::from_fn(|c| COLORMAP_STOPS[i][c] * (1.0 - f) + COLORMAP_STOPS[i + 1][c] * f)
}

/// `(1 - alpha) * image + alpha * colormap(map)`, per pixel.
pub fn render_overlay(image: &RgbImage, map: &ActivationMap, blend_alpha: f64) -> Result<RgbImage, ExplainError> {
    if !(blend_alpha > 0.0 && blend_alpha < 1.0) {
        return Err(ExplainError::Param(blend_alpha));
    }
    if image.dimensions() != (map.width(), map.height()) {
        return Err(ExplainError::SizeMismatch {
            image: image.dimensions(),
            map: (map.width(), map.height()),
        });
    }
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let base = image.get_pixel(x, y).0;
        let heat = colormap(map.grid[[y as usize, x as usize]]);
        Rgb(std::array::from_fn(|c| {
            ((1.0 - blend_alpha) * base[c] as f64 + blend_alpha * heat[c]).round().clamp(0.0, 255.0) as u8
        }))
    }))
}
