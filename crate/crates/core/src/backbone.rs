//! Residual CNN mapping one 1x32x32 pressure frame to a feature vector.
//!
//! The stem is a 3x3 stride-1 conv on a single input channel (a 7x7 stride-2
//! stem would destroy most of a 32x32 frame) and there is no initial
//! max-pool. Downsampling blocks pool with a 2x2 average first and keep all
//! convolutions at stride 1, so every conv produces an exact output size.
//! Global average pooling over the final map yields the feature vector; the
//! tiny preset follows it with a linear lift to the configured width.

use crate::error::{Error, Result};
use crate::nn::{Affine, BatchNorm, BnUpdates, Conv2d};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 8 residual blocks in 4 stages (2 each), channels 64/128/256/512.
    Resnet18,
    /// 2 stages, channels 16/32, for CPU-scale tests and gradient checks.
    Tiny,
}

impl Preset {
    pub fn default_feature_dim(self) -> usize {
        match self {
            Preset::Resnet18 => 512,
            Preset::Tiny => 64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub preset: Preset,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn new(preset: Preset, num_classes: usize) -> Self {
        BackboneConfig {
            preset,
            feature_dim: preset.default_feature_dim(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 8 {
            return Err(Error::config(
                "backbone",
                format!("feature_dim must be >= 8, got {}", self.feature_dim),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config(
                "backbone",
                format!("num_classes must be >= 2, got {}", self.num_classes),
            ));
        }
        let required = self.preset.default_feature_dim();
        if self.feature_dim != required {
            return Err(Error::config(
                "backbone",
                format!(
                    "preset {:?} fixes feature_dim = {required}, got {}",
                    self.preset, self.feature_dim
                ),
            ));
        }
        Ok(())
    }
}

/// Two 3x3 conv+norm stages with a skip connection. Downsampling blocks
/// average-pool the input once and project the skip with a 1x1 conv.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm<T>,
    proj: Option<(Conv2d<T>, BatchNorm<T>)>,
    downsample: bool,
    pub c_out: usize,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new(c_in: usize, c_out: usize, downsample: bool, rng: &mut Rng) -> Self {
        let proj = if c_in != c_out {
            Some((Conv2d::new(c_in, c_out, 1, 1, 0, rng), BatchNorm::new_2d(c_out)))
        } else {
            None
        };
        ResidualBlock {
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            bn1: BatchNorm::new_2d(c_out),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            bn2: BatchNorm::new_2d(c_out),
            proj,
            downsample,
            c_out,
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let x = if self.downsample {
            tape.avg_pool2d(x, 2)?
        } else {
            x
        };
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode, sink)?;
        let h = tape.leaky_relu(h, T::ZERO);
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode, sink)?;
        let skip = match &self.proj {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode, sink)?
            }
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.leaky_relu(y, T::ZERO))
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.conv1.params_mut();
        p.extend(self.bn1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.proj {
            p.extend(conv.params_mut());
            p.extend(bn.params_mut());
        }
        p
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.conv1.named(&format!("{prefix}.conv1"));
        out.extend(self.bn1.named(&format!("{prefix}.bn1")));
        out.extend(self.conv2.named(&format!("{prefix}.conv2")));
        out.extend(self.bn2.named(&format!("{prefix}.bn2")));
        if let Some((conv, bn)) = &self.proj {
            out.extend(conv.named(&format!("{prefix}.proj")));
            out.extend(bn.named(&format!("{prefix}.proj_bn")));
        }
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.conv1.named_mut(&format!("{prefix}.conv1"));
        out.extend(self.bn1.named_mut(&format!("{prefix}.bn1")));
        out.extend(self.conv2.named_mut(&format!("{prefix}.conv2")));
        out.extend(self.bn2.named_mut(&format!("{prefix}.bn2")));
        if let Some((conv, bn)) = &mut self.proj {
            out.extend(conv.named_mut(&format!("{prefix}.proj")));
            out.extend(bn.named_mut(&format!("{prefix}.proj_bn")));
        }
        out
    }

    fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.proj {
            out.push(bn);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub config: BackboneConfig,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm<T>,
    blocks: Vec<ResidualBlock<T>>,
    /// Lifts the pooled channels to `feature_dim` when they differ (tiny).
    lift: Option<Affine<T>>,
    /// Detachable classification head used during stage-1 pretraining.
    pub head: Affine<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (stem_ch, plan): (usize, Vec<(usize, usize, bool)>) = match config.preset {
            Preset::Resnet18 => (
                64,
                vec![
                    (64, 64, false),
                    (64, 64, false),
                    (64, 128, true),
                    (128, 128, false),
                    (128, 256, true),
                    (256, 256, false),
                    (256, 512, true),
                    (512, 512, false),
                ],
            ),
            Preset::Tiny => (16, vec![(16, 16, false), (16, 32, true)]),
        };
        let stem_conv = Conv2d::new(1, stem_ch, 3, 1, 1, rng);
        let stem_bn = BatchNorm::new_2d(stem_ch);
        let blocks: Vec<ResidualBlock<T>> = plan
            .into_iter()
            .map(|(cin, cout, ds)| ResidualBlock::new(cin, cout, ds, rng))
            .collect();
        let gap_ch = blocks.last().expect("at least one block").c_out;
        let lift = if gap_ch != config.feature_dim {
            Some(Affine::new(gap_ch, config.feature_dim, rng))
        } else {
            None
        };
        let head = Affine::new(config.feature_dim, config.num_classes, rng);
        Ok(Backbone {
            config,
            stem_conv,
            stem_bn,
            blocks,
            lift,
            head,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.c_out).collect()
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        match s {
            [b, 1, 32, 32] => Ok(*b),
            [1, 32, 32] => Ok(1),
            _ => Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: s.to_vec(),
                rhs: vec![1, 32, 32],
            }),
        }
    }

    /// Frames [B,1,32,32] (or one [1,32,32] frame) to features [B x D].
    pub fn forward_features(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let batch = self.check_input(tape, x)?;
        let x = tape.reshape(x, vec![batch, 1, 32, 32])?;
        let h = self.stem_conv.forward(tape, x)?;
        let h = self.stem_bn.forward(tape, h, mode, sink)?;
        let mut h = tape.leaky_relu(h, T::ZERO);
        for block in &self.blocks {
            h = block.forward(tape, h, mode, sink)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        match &self.lift {
            Some(lift) => lift.forward(tape, pooled),
            None => Ok(pooled),
        }
    }

    /// Stage-1 classification logits [B x num_classes].
    pub fn forward_logits(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let f = self.forward_features(tape, x, mode, sink)?;
        self.head.forward(tape, f)
    }

    /// Feature-path parameters (everything except the pretraining head).
    pub fn feature_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.stem_conv.params_mut();
        p.extend(self.stem_bn.params_mut());
        for b in &mut self.blocks {
            p.extend(b.params_mut());
        }
        if let Some(l) = &mut self.lift {
            p.extend(l.params_mut());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let Backbone {
            stem_conv,
            stem_bn,
            blocks,
            lift,
            head,
            ..
        } = self;
        let mut p = stem_conv.params_mut();
        p.extend(stem_bn.params_mut());
        for b in blocks {
            p.extend(b.params_mut());
        }
        if let Some(l) = lift {
            p.extend(l.params_mut());
        }
        p.extend(head.params_mut());
        p
    }

    /// Feature-path tensors, running stats included (checkpoint contents).
    pub fn named_features(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.stem_conv.named(&format!("{prefix}.stem"));
        out.extend(self.stem_bn.named(&format!("{prefix}.stem_bn")));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("{prefix}.block{i}")));
        }
        if let Some(l) = &self.lift {
            out.extend(l.named(&format!("{prefix}.lift")));
        }
        out
    }

    pub fn named_features_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.stem_conv.named_mut(&format!("{prefix}.stem"));
        out.extend(self.stem_bn.named_mut(&format!("{prefix}.stem_bn")));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("{prefix}.block{i}")));
        }
        if let Some(l) = &mut self.lift {
            out.extend(l.named_mut(&format!("{prefix}.lift")));
        }
        out
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.named_features(prefix);
        out.extend(self.head.named(&format!("{prefix}.head")));
        out
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let Backbone {
            stem_conv,
            stem_bn,
            blocks,
            lift,
            head,
            ..
        } = self;
        let mut out = stem_conv.named_mut(&format!("{prefix}.stem"));
        out.extend(stem_bn.named_mut(&format!("{prefix}.stem_bn")));
        for (i, b) in blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("{prefix}.block{i}")));
        }
        if let Some(l) = lift {
            out.extend(l.named_mut(&format!("{prefix}.lift")));
        }
        out.extend(head.named_mut(&format!("{prefix}.head")));
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            out.extend(b.bn_layers_mut());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}
