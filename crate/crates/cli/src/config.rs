//! Run configuration: JSON file plus long-form flag overrides, one flag per
//! field. Paper-stated hyperparameters are the defaults wherever the paper
//! states them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tvgcn_core::backbone::Preset;
use tvgcn_core::error::{Error, Result};
use tvgcn_core::viewgraph::{circular_viewpoints, cube_viewpoints, normalize_viewpoints, Viewpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ViewLayout {
    Cube8,
    Circular12,
}

impl ViewLayout {
    pub fn count(self) -> usize {
        match self {
            ViewLayout::Cube8 => 8,
            ViewLayout::Circular12 => 12,
        }
    }

    pub fn default_n_neighbors(self) -> usize {
        match self {
            ViewLayout::Cube8 => 3,
            ViewLayout::Circular12 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLayout::Cube8 => "cube8",
            ViewLayout::Circular12 => "circular12",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackbonePreset {
    Resnet18,
    Tiny,
}

impl BackbonePreset {
    pub fn to_core(self) -> Preset {
        match self {
            BackbonePreset::Resnet18 => Preset::Resnet18,
            BackbonePreset::Tiny => Preset::Tiny,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Resnet18 => "resnet18",
            BackbonePreset::Tiny => "tiny",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub views: ViewLayout,
    pub backbone: BackbonePreset,
    /// Derived from the preset when absent.
    pub feature_dim: Option<usize>,
    pub selector_hidden: usize,
    /// Derived from the layout when absent.
    pub n_neighbors: Option<usize>,
    pub levels: usize,
    pub batch_size: usize,
    pub epochs_backbone: u32,
    pub epochs_joint: u32,
    pub lr_stage1: f64,
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub leaky_slope: f64,
    pub view_loss_weight: f64,
    pub normalize_viewpoints: bool,
    pub share_relation_mlp: bool,
    pub fps_seed: usize,
    pub joint_samples_per_class: usize,
    pub eval_samples_per_class: usize,
    pub classes: usize,
    pub frames_per_class: usize,
    pub trials: usize,
    pub gradcheck_coords: usize,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub backbone_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub confusion: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            views: ViewLayout::Cube8,
            backbone: BackbonePreset::Resnet18,
            feature_dim: None,
            selector_hidden: 64,
            n_neighbors: None,
            levels: 3,
            batch_size: 32,
            epochs_backbone: 30,
            epochs_joint: 15,
            lr_stage1: 5e-3,
            lr_backbone: 1e-4,
            lr_gcn: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            leaky_slope: 0.01,
            view_loss_weight: 1.0,
            normalize_viewpoints: false,
            share_relation_mlp: true,
            fps_seed: 0,
            joint_samples_per_class: 32,
            eval_samples_per_class: 32,
            classes: 4,
            frames_per_class: 200,
            trials: 1,
            gradcheck_coords: 6,
            dataset: None,
            out: None,
            backbone_checkpoint: None,
            checkpoint: None,
            resume: None,
            confusion: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn resolved_feature_dim(&self) -> usize {
        self.feature_dim
            .unwrap_or_else(|| self.backbone.to_core().default_feature_dim())
    }

    pub fn resolved_n_neighbors(&self) -> usize {
        self.n_neighbors
            .unwrap_or_else(|| self.views.default_n_neighbors())
    }

    pub fn viewpoints(&self) -> Vec<Viewpoint> {
        let mut pts = match self.views {
            ViewLayout::Cube8 => cube_viewpoints(),
            ViewLayout::Circular12 => {
                circular_viewpoints(12, 30.0).expect("12 >= 3")
            }
        };
        if self.normalize_viewpoints {
            normalize_viewpoints(&mut pts);
        }
        pts
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::config("config", "--dataset is required"))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("config", "--out is required"))
    }

    /// FNV-1a over the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// Architecture fields stored in checkpoint sidecars and compared at
    /// load time.
    pub fn arch_fields(&self, num_classes: usize) -> BTreeMap<String, serde_json::Value> {
        let mut m = BTreeMap::new();
        m.insert("views".into(), serde_json::json!(self.views.as_str()));
        m.insert(
            "backbone".into(),
            serde_json::json!(self.backbone.as_str()),
        );
        m.insert(
            "feature_dim".into(),
            serde_json::json!(self.resolved_feature_dim()),
        );
        m.insert("num_classes".into(), serde_json::json!(num_classes));
        m.insert("levels".into(), serde_json::json!(self.levels));
        m.insert(
            "n_neighbors".into(),
            serde_json::json!(self.resolved_n_neighbors()),
        );
        m.insert(
            "selector_hidden".into(),
            serde_json::json!(self.selector_hidden),
        );
        m.insert(
            "share_relation_mlp".into(),
            serde_json::json!(self.share_relation_mlp),
        );
        m.insert(
            "normalize_viewpoints".into(),
            serde_json::json!(self.normalize_viewpoints),
        );
        m
    }

    /// Compares the checkpoint's stored architecture against this config,
    /// naming the first differing field.
    pub fn check_arch(
        &self,
        stored: &BTreeMap<String, serde_json::Value>,
        num_classes: usize,
    ) -> Result<()> {
        for (field, want) in self.arch_fields(num_classes) {
            match stored.get(&field) {
                Some(got) if *got == want => {}
                Some(got) => {
                    return Err(Error::config(
                        "checkpoint",
                        format!("field '{field}' differs: config wants {want}, checkpoint has {got}"),
                    ))
                }
                None => {
                    return Err(Error::config(
                        "checkpoint",
                        format!("field '{field}' missing from checkpoint metadata"),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Long-form flag overrides, one per config field.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// JSON config file mirroring the RunConfig fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub views: Option<ViewLayout>,
    #[arg(long, global = true, value_enum)]
    pub backbone: Option<BackbonePreset>,
    #[arg(long, global = true)]
    pub feature_dim: Option<usize>,
    #[arg(long, global = true)]
    pub selector_hidden: Option<usize>,
    #[arg(long, global = true)]
    pub n_neighbors: Option<usize>,
    #[arg(long, global = true)]
    pub levels: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub epochs_backbone: Option<u32>,
    #[arg(long, global = true)]
    pub epochs_joint: Option<u32>,
    #[arg(long, global = true)]
    pub lr_stage1: Option<f64>,
    #[arg(long, global = true)]
    pub lr_backbone: Option<f64>,
    #[arg(long, global = true)]
    pub lr_gcn: Option<f64>,
    #[arg(long, global = true)]
    pub momentum: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    #[arg(long, global = true)]
    pub leaky_slope: Option<f64>,
    #[arg(long, global = true)]
    pub view_loss_weight: Option<f64>,
    #[arg(long, global = true)]
    pub normalize_viewpoints: Option<bool>,
    #[arg(long, global = true)]
    pub share_relation_mlp: Option<bool>,
    #[arg(long, global = true)]
    pub fps_seed: Option<usize>,
    #[arg(long, global = true)]
    pub joint_samples_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub eval_samples_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub classes: Option<usize>,
    #[arg(long, global = true)]
    pub frames_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    #[arg(long, global = true)]
    pub gradcheck_coords: Option<usize>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backbone_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub resume: Option<PathBuf>,
    #[arg(long, global = true)]
    pub confusion: Option<PathBuf>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = Some(v.clone());
                })*
            };
        }
        macro_rules! apply_plain {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field {
                    cfg.$field = v;
                })*
            };
        }
        apply_plain!(
            seed,
            views,
            backbone,
            selector_hidden,
            levels,
            batch_size,
            epochs_backbone,
            epochs_joint,
            lr_stage1,
            lr_backbone,
            lr_gcn,
            momentum,
            weight_decay,
            leaky_slope,
            view_loss_weight,
            normalize_viewpoints,
            share_relation_mlp,
            fps_seed,
            joint_samples_per_class,
            eval_samples_per_class,
            classes,
            frames_per_class,
            trials,
            gradcheck_coords,
        );
        if let Some(v) = self.feature_dim {
            cfg.feature_dim = Some(v);
        }
        if let Some(v) = self.n_neighbors {
            cfg.n_neighbors = Some(v);
        }
        apply!(dataset, out, backbone_checkpoint, checkpoint, resume, confusion);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.epochs_backbone, 30);
        assert_eq!(cfg.epochs_joint, 15);
        assert_eq!(cfg.lr_stage1, 5e-3);
        assert_eq!(cfg.lr_backbone, 1e-4);
        assert_eq!(cfg.lr_gcn, 5e-4);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.views.count(), 8);
        assert_eq!(cfg.resolved_n_neighbors(), 3);
        assert_eq!(cfg.resolved_feature_dim(), 512);
    }

    #[test]
    fn circular_defaults() {
        let mut cfg = RunConfig::default();
        cfg.views = ViewLayout::Circular12;
        assert_eq!(cfg.views.count(), 12);
        assert_eq!(cfg.resolved_n_neighbors(), 2);
        assert_eq!(cfg.viewpoints().len(), 12);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn json_round_trip_and_unknown_field_rejection() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let bad = r#"{"seed": 3, "no_such_field": true}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
    }

    #[test]
    fn arch_check_names_differing_field() {
        let cfg = RunConfig::default();
        let mut stored = cfg.arch_fields(26);
        stored.insert("levels".into(), serde_json::json!(2));
        let err = cfg.check_arch(&stored, 26).unwrap_err().to_string();
        assert!(err.contains("levels"), "{err}");
    }
}
