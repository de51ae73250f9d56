//! Backbone strategies, registered by id and selected at runtime.
//!
//! A backbone factory turns a [`ModelConfig`] into a [`ConvStack`] carrying
//! its starting ("pretrained") weights. Ids of the form `file:<path>` load
//! the backbone out of an existing checkpoint instead.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{Checkpoint, ModelConfig, ModelError};
use crate::nn::{Conv2d, ConvStack, Layer};

pub trait BackboneFactory: Send + Sync {
    fn id(&self) -> &str;
    fn description(&self) -> &str;
    /// Name of the last convolutional activation.
    fn default_target_layer(&self) -> &str;
    fn build(&self, config: &ModelConfig) -> Result<ConvStack, ModelError>;
}

#[derive(Default)]
pub struct BackboneRegistry {
    entries: BTreeMap<String, Box<dyn BackboneFactory>>,
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry holding every built-in backbone.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(ShapePrimitives);
        r.register(SmallCnn);
        r.register(TwoConv::default());
        r
    }

    pub fn register<F: BackboneFactory + 'static>(&mut self, factory: F) {
        self.entries.insert(factory.id().to_string(), Box::new(factory));
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&dyn BackboneFactory> {
        self.entries.get(id).map(|b| b.as_ref())
    }

    /// Default target layer for `id`, if it names a registered backbone.
    pub fn default_target_layer(&self, id: &str) -> Option<String> {
        self.get(id).map(|f| f.default_target_layer().to_string())
    }

    pub fn build(&self, config: &ModelConfig) -> Result<ConvStack, ModelError> {
        if let Some(path) = config.backbone_id.strip_prefix("file:") {
            let ckpt = Checkpoint::load(Path::new(path))?;
            return Ok(ckpt.backbone);
        }
        match self.get(&config.backbone_id) {
            Some(factory) => factory.build(config),
            None => Err(ModelError::UnknownBackbone {
                id: config.backbone_id.clone(),
                available: self.ids(),
            }),
        }
    }
}

/// Analytic filter bank for geometric primitives.
///
/// `mask` thresholds luminance into a soft foreground indicator
/// `I = mask_act[0] - mask_act[1]` that saturates at 1 for bright pixels.
/// `primitives` then matches 7x7 binary templates on `I`: straight borders at
/// 16 normal orientations, right-angle corners and 60-degree corners. Every
/// template requires the centre pixel to be foreground, so responses sit on
/// the object itself.
#[derive(Debug, Clone, Copy)]
pub struct ShapePrimitives;

/// Half-plane / wedge template, outward normals in image coordinates
/// (x right, y down), degrees.
struct Template(&'static [f64]);

const TEMPLATES: &[Template] = &[
    Template(&[0.0]),
    Template(&[30.0]),
    Template(&[45.0]),
    Template(&[60.0]),
    Template(&[90.0]),
    Template(&[120.0]),
    Template(&[135.0]),
    Template(&[150.0]),
    Template(&[180.0]),
    Template(&[210.0]),
    Template(&[225.0]),
    Template(&[240.0]),
    Template(&[270.0]),
    Template(&[300.0]),
    Template(&[315.0]),
    Template(&[330.0]),
    Template(&[270.0, 180.0]),
    Template(&[270.0, 0.0]),
    Template(&[90.0, 180.0]),
    Template(&[90.0, 0.0]),
    Template(&[210.0, 330.0]),
    Template(&[90.0, 210.0]),
    Template(&[90.0, 330.0]),
];

const TEMPLATE_RADIUS: i64 = 3;
const TEMPLATE_MARGIN: f64 = 0.75;

impl ShapePrimitives {
    pub const MASK_LAYER: &'static str = "mask_act";
    pub const TARGET_LAYER: &'static str = "primitives_act";

    pub fn channels() -> usize {
        TEMPLATES.len()
    }

    /// `+1` must be foreground, `-1` must be background, `0` ignored.
    fn template_weights(normals: &[f64]) -> Vec<(i64, i64, f64)> {
        let units: Vec<(f64, f64)> = normals
            .iter()
            .map(|deg| (deg.to_radians().cos(), deg.to_radians().sin()))
            .collect();
        let mut taps = Vec::new();
        for dy in -TEMPLATE_RADIUS..=TEMPLATE_RADIUS {
            for dx in -TEMPLATE_RADIUS..=TEMPLATE_RADIUS {
                let w = if dx == 0 && dy == 0 {
                    1.0
                } else {
                    // Borders pass half a pixel beyond the centre.
                    let d = units
                        .iter()
                        .map(|(c, s)| dx as f64 * c + dy as f64 * s - 0.5)
                        .fold(f64::NEG_INFINITY, f64::max);
                    if d <= -TEMPLATE_MARGIN {
                        1.0
                    } else if d >= TEMPLATE_MARGIN {
                        -1.0
                    } else {
                        0.0
                    }
                };
                taps.push((dy, dx, w));
            }
        }
        taps
    }

    fn gain(input_size: u32) -> f64 {
        (input_size as f64).powi(2) / 16.0
    }
}

impl BackboneFactory for ShapePrimitives {
    fn id(&self) -> &str {
        "shape-primitives"
    }

    fn description(&self) -> &str {
        "fixed foreground-mask + 7x7 border/corner template bank"
    }

    fn default_target_layer(&self) -> &str {
        Self::TARGET_LAYER
    }

    fn build(&self, config: &ModelConfig) -> Result<ConvStack, ModelError> {
        // Foreground ramp: 0 below luminance -0.2, 1 above 0.
        let (slope, threshold) = (5.0, -0.2);
        let mut mask = Conv2d::zeros(1, 1, 0, 3, 2);
        for ci in 0..3 {
            for co in 0..2 {
                let idx = mask.weight_index(0, 0, ci, co);
                mask.weight[idx] = slope / 3.0;
            }
        }
        mask.bias = vec![-slope * threshold, -slope * threshold - 1.0];

        let k = TEMPLATES.len();
        let r = TEMPLATE_RADIUS as usize;
        let gain = Self::gain(config.input_size);
        let mut prim = Conv2d::zeros(2 * r + 1, 1, r, 2, k);
        for (co, template) in TEMPLATES.iter().enumerate() {
            let taps = Self::template_weights(template.0);
            let required = taps.iter().filter(|t| t.2 > 0.0).count() as f64;
            for (dy, dx, w) in taps {
                let (ky, kx) = ((dy + TEMPLATE_RADIUS) as usize, (dx + TEMPLATE_RADIUS) as usize);
                let i0 = prim.weight_index(ky, kx, 0, co);
                let i1 = prim.weight_index(ky, kx, 1, co);
                prim.weight[i0] = gain * w;
                prim.weight[i1] = -gain * w;
            }
            // Perfect match scores `required`; any violation drops it to <= 0.
            prim.bias[co] = -gain * (required - 1.0);
        }

        Ok(ConvStack {
            layers: vec![
                Layer::conv("mask", mask),
                Layer::relu(Self::MASK_LAYER),
                Layer::conv("primitives", prim),
                Layer::relu(Self::TARGET_LAYER),
            ],
        })
    }
}

/// Randomly initialised three-stage CNN for training from scratch.
#[derive(Debug, Clone, Copy)]
pub struct SmallCnn;

impl BackboneFactory for SmallCnn {
    fn id(&self) -> &str {
        "small-cnn"
    }

    fn description(&self) -> &str {
        "3x(conv3x3 + relu) with 2x2 average pooling, He-uniform init"
    }

    fn default_target_layer(&self) -> &str {
        "conv3_act"
    }

    fn build(&self, config: &ModelConfig) -> Result<ConvStack, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(ConvStack {
            layers: vec![
                Layer::conv("conv1", Conv2d::random(&mut rng, 3, 1, 1, 3, 16)),
                Layer::relu("conv1_act"),
                Layer::avg_pool("pool1", 2),
                Layer::conv("conv2", Conv2d::random(&mut rng, 3, 1, 1, 16, 32)),
                Layer::relu("conv2_act"),
                Layer::avg_pool("pool2", 2),
                Layer::conv("conv3", Conv2d::random(&mut rng, 3, 1, 1, 32, 64)),
                Layer::relu("conv3_act"),
            ],
        })
    }
}

/// Two same-padded 3x3 conv + ReLU layers with random weights.
#[derive(Debug, Clone, Copy)]
pub struct TwoConv {
    pub hidden: usize,
    pub channels: usize,
}

impl Default for TwoConv {
    fn default() -> Self {
        Self { hidden: 8, channels: 8 }
    }
}

impl TwoConv {
    pub fn stack(&self, seed: u64) -> ConvStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ConvStack {
            layers: vec![
                Layer::conv("conv1", Conv2d::random(&mut rng, 3, 1, 1, 3, self.hidden)),
                Layer::relu("conv1_act"),
                Layer::conv("conv2", Conv2d::random(&mut rng, 3, 1, 1, self.hidden, self.channels)),
                Layer::relu("conv2_act"),
            ],
        }
    }
}

impl BackboneFactory for TwoConv {
    fn id(&self) -> &str {
        "two-conv"
    }

    fn description(&self) -> &str {
        "two random 3x3 conv + relu layers"
    }

    fn default_target_layer(&self) -> &str {
        "conv2_act"
    }

    fn build(&self, config: &ModelConfig) -> Result<ConvStack, ModelError> {
        Ok(self.stack(config.seed))
    }
}
