//! Model configuration, the trainable/explainable bundle, prediction and
//! checkpoints.

use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneRegistry;
use crate::nn::{self, ConvStack, Dense, Head, HeadTrace};

pub const CHECKPOINT_FORMAT: &str = "eventxai-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("unknown backbone {id:?}; available: {available:?}")]
    UnknownBackbone { id: String, available: Vec<String> },
    #[error("backbone has no layer {layer:?}; available: {available:?}")]
    UnknownLayer { layer: String, available: Vec<String> },
    #[error("dataset has {found} classes but the model is configured for {expected}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("loss became non-finite in epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("expected input batch of shape [B, {size}, {size}, 3], got {got:?}")]
    ShapeMismatch { size: u32, got: Vec<usize> },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pooling + one dense layer.
    GapDense,
    /// Global average pooling + hidden ReLU layer + dense layer.
    GapMlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone_id: String,
    pub input_size: u32,
    pub num_classes: usize,
    pub target_layer: String,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_id: "shape-primitives".to_string(),
            input_size: 299,
            num_classes: 2,
            target_layer: "primitives_act".to_string(),
            lr_backbone: 1e-5,
            lr_head: 1e-3,
            epochs: 10,
            batch_size: 120,
            seed: 13,
            head: HeadKind::GapDense,
        }
    }
}

impl ModelConfig {
    /// Defaults for `backbone_id`, with its default target layer.
    pub fn for_backbone(registry: &BackboneRegistry, backbone_id: &str, num_classes: usize) -> Self {
        let target_layer = registry
            .default_target_layer(backbone_id)
            .unwrap_or_else(|| Self::default().target_layer);
        Self { backbone_id: backbone_id.to_string(), num_classes, target_layer, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.input_size == 0 {
            return fail("input_size must be positive".into());
        }
        let lrs_ok = self.lr_backbone.is_finite() && self.lr_head.is_finite() && self.lr_backbone >= 0.0;
        if !lrs_ok || self.lr_backbone >= self.lr_head {
            return fail(format!(
                "lr_backbone ({}) must be below lr_head ({})",
                self.lr_backbone, self.lr_head
            ));
        }
        if let HeadKind::GapMlp { hidden: 0 } = self.head {
            return fail("hidden head width must be positive".into());
        }
        Ok(())
    }
}

/// Backbone, head and configuration: the unit that is trained, saved and
/// explained.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub backbone: ConvStack,
    pub head: Head,
    target_index: usize,
}

/// Everything computed by one forward pass of a single image.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `backbone[0]` is the input, `backbone[i + 1]` the output of layer `i`.
    pub backbone: Vec<Array3<f64>>,
    pub head: HeadTrace,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        &self.head.logits
    }

    pub fn features(&self) -> &Array3<f64> {
        self.backbone.last().expect("non-empty trace")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub classes: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

fn fresh_head(config: &ModelConfig, channels: usize) -> Head {
    // The logits layer starts at zero; only the MLP hidden layer is random.
    match config.head {
        HeadKind::GapDense => Head::GapDense { dense: Dense::zeros(channels, config.num_classes) },
        HeadKind::GapMlp { hidden } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4845_4144);
            Head::GapMlp {
                hidden: Dense::glorot(&mut rng, channels, hidden),
                out: Dense::zeros(hidden, config.num_classes),
            }
        }
    }
}

fn locate_layer(backbone: &ConvStack, layer: &str) -> Result<usize, ModelError> {
    backbone.layer_index(layer).ok_or_else(|| ModelError::UnknownLayer {
        layer: layer.to_string(),
        available: backbone.layer_names(),
    })
}

/// Builds a bundle: backbone weights from the registry, fresh head.
pub fn build(config: ModelConfig, registry: &BackboneRegistry) -> Result<ModelBundle, ModelError> {
    config.validate()?;
    let backbone = registry.build(&config)?;
    let target_index = locate_layer(&backbone, &config.target_layer)?;
    let head = fresh_head(&config, backbone.out_channels(3));
    let class_names = (0..config.num_classes).map(|i| format!("class_{i}")).collect();
    Ok(ModelBundle { config, class_names, backbone, head, target_index })
}

impl ModelBundle {
    /// Assembles a bundle from explicit parts.
    pub fn from_parts(
        config: ModelConfig,
        class_names: Vec<String>,
        backbone: ConvStack,
        head: Head,
    ) -> Result<Self, ModelError> {
        let target_index = locate_layer(&backbone, &config.target_layer)?;
        let channels = backbone.out_channels(3);
        if head.in_channels() != channels || head.num_classes() != config.num_classes {
            return Err(ModelError::Config(format!(
                "head expects {} channels / {} classes, backbone gives {} channels and config {} classes",
                head.in_channels(),
                head.num_classes(),
                channels,
                config.num_classes
            )));
        }
        if class_names.len() != config.num_classes {
            return Err(ModelError::ClassCountMismatch {
                expected: config.num_classes,
                found: class_names.len(),
            });
        }
        Ok(Self { config, class_names, backbone, head, target_index })
    }

    /// Index into the backbone layers of the explained activation.
    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_layer(&self) -> &str {
        &self.config.target_layer
    }

    /// Moves explanations to another backbone layer.
    pub fn set_target_layer(&mut self, layer: &str) -> Result<(), ModelError> {
        self.target_index = locate_layer(&self.backbone, layer)?;
        self.config.target_layer = layer.to_string();
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn check_image(&self, image: &ArrayView3<f32>) -> Result<(), ModelError> {
        let s = self.config.input_size as usize;
        if image.dim() != (s, s, 3) {
            return Err(ModelError::ShapeMismatch {
                size: self.config.input_size,
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn trace(&self, image: ArrayView3<f32>) -> Result<ForwardTrace, ModelError> {
        self.check_image(&image)?;
        let backbone = self.backbone.forward_trace(image.mapv(f64::from));
        let head = self.head.forward(backbone.last().expect("non-empty"));
        Ok(ForwardTrace { backbone, head })
    }

    pub fn logits(&self, image: ArrayView3<f32>) -> Result<Vec<f64>, ModelError> {
        Ok(self.trace(image)?.head.logits)
    }

    /// Class ids (argmax, ties to the lower id) and softmax probabilities.
    pub fn predict(&self, images: &Array4<f32>) -> Result<Prediction, ModelError> {
        let s = self.config.input_size as usize;
        let (_, h, w, c) = images.dim();
        if (h, w, c) != (s, s, 3) {
            return Err(ModelError::ShapeMismatch {
                size: self.config.input_size,
                got: images.shape().to_vec(),
            });
        }
        let views: Vec<_> = images.axis_iter(Axis(0)).collect();
        let probabilities = views
            .into_par_iter()
            .map(|img| self.logits(img).map(|l| nn::softmax(&l)))
            .collect::<Result<Vec<_>, _>>()?;
        let classes = probabilities.iter().map(|p| nn::argmax(p)).collect();
        Ok(Prediction { classes, probabilities })
    }

    /// All trainable tensors, backbone first.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.backbone.params_mut();
        p.extend(self.head.params_mut());
        p
    }

    /// Number of backbone tensors at the front of [`params`](Self::params).
    pub fn backbone_param_count(&self) -> usize {
        self.backbone.params().len()
    }

    /// Loss and parameter gradients for one labelled image.
    pub fn loss_and_grads(&self, image: ArrayView3<f32>, label: usize) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let trace = self.trace(image)?;
        let (loss, dlogits) = nn::cross_entropy(trace.logits(), label);
        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let split = self.backbone_param_count();
        let (backbone_grads, head_grads) = grads.split_at_mut(split);
        let g = self.head.backward(trace.features().dim(), &trace.head, &dlogits, Some(head_grads));
        self.backbone.backward_to(&trace.backbone, g, 0, Some(backbone_grads));
        Ok((loss, grads))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Checkpoint::load(path)?.into_bundle()
    }
}

/// Self-describing checkpoint: weights, config and class-name table in one
/// JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub backbone: ConvStack,
    pub head: Head,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Config(format!("unsupported checkpoint format {:?}", ckpt.format)));
        }
        Ok(ckpt)
    }

    pub fn into_bundle(self) -> Result<ModelBundle, ModelError> {
        ModelBundle::from_parts(self.config, self.class_names, self.backbone, self.head)
    }
}
