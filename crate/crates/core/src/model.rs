//! The full pipeline: backbone features feeding the view-graph hierarchy.

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::gcn::{GcnConfig, GcnOutput, ViewGcn};
use crate::nn::{apply_bn_updates, BnUpdates};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::viewgraph::Viewpoint;

#[derive(Debug, Clone)]
pub struct JointModel<T: Scalar> {
    pub backbone: Backbone<T>,
    pub gcn: ViewGcn<T>,
}

impl<T: Scalar> JointModel<T> {
    pub fn new(backbone_cfg: BackboneConfig, gcn_cfg: GcnConfig, rng: &mut Rng) -> Result<Self> {
        if backbone_cfg.feature_dim != gcn_cfg.feature_dim {
            return Err(Error::config(
                "joint_model",
                format!(
                    "backbone feature_dim {} != gcn feature_dim {}",
                    backbone_cfg.feature_dim, gcn_cfg.feature_dim
                ),
            ));
        }
        if backbone_cfg.num_classes != gcn_cfg.num_classes {
            return Err(Error::config(
                "joint_model",
                format!(
                    "backbone num_classes {} != gcn num_classes {}",
                    backbone_cfg.num_classes, gcn_cfg.num_classes
                ),
            ));
        }
        Ok(JointModel {
            backbone: Backbone::new(backbone_cfg, rng)?,
            gcn: ViewGcn::new(gcn_cfg, rng)?,
        })
    }

    /// One view-set forward: `frames` is [N, 1, 32, 32] with row k paired
    /// with `viewpoints[k]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        frames: Var,
        viewpoints: &[Viewpoint],
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<GcnOutput> {
        let features = self.backbone.forward_features(tape, frames, mode, sink)?;
        self.gcn.forward(tape, features, viewpoints, mode, sink)
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.backbone.named("backbone");
        out.extend(self.gcn.named("gcn"));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let JointModel { backbone, gcn } = self;
        let mut out = backbone.named_mut("backbone");
        out.extend(gcn.named_mut("gcn"));
        out
    }

    /// Trainable parameters only (named entries also cover running stats).
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.named().into_iter().filter(|(_, t)| t.is_param()).collect()
    }

    pub fn backbone_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.backbone.params_mut()
    }

    pub fn gcn_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.gcn.params_mut()
    }

    pub fn accumulate_grads_from(&mut self, tape: &Tape<T>, scale: T) {
        for (_, p) in self.named_mut() {
            if !p.is_param() {
                continue;
            }
            let uid = p.uid();
            if let Some(g) = tape.param_grad(uid) {
                let g = g.to_vec();
                p.accumulate_grad_scaled(&g, scale);
            }
        }
    }

    pub fn apply_bn_updates(&mut self, sink: &mut BnUpdates<T>) -> Result<()> {
        let JointModel { backbone, gcn } = self;
        let mut layers = backbone.bn_layers_mut();
        layers.extend(gcn.bn_layers_mut());
        apply_bn_updates(sink, &mut layers)
    }

    pub fn zero_grad(&mut self) {
        self.backbone.zero_grad();
        self.gcn.zero_grad();
    }
}
