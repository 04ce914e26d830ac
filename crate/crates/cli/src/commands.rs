//! The six commands: synth, cluster, train-backbone, train, eval, gradcheck.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use tvgcn_core::backbone::{Backbone, BackboneConfig};
use tvgcn_core::checkpoint::{self, CheckpointMeta};
use tvgcn_core::dataset::{self, cluster_frames, load_clusters, load_dataset, Dataset};
use tvgcn_core::error::{DatasetError, Error, Result};
use tvgcn_core::gcn::GcnConfig;
use tvgcn_core::gradcheck::{check_joint_model, GradcheckReport, GROUP_TOLERANCE};
use tvgcn_core::harness::{
    eval_joint, train_backbone, train_joint, BackboneTrainParams, JointTrainParams, ViewSetSource,
};
use tvgcn_core::model::JointModel;
use tvgcn_core::optim::SgdMomentum;
use tvgcn_core::rng::Rng;
use tvgcn_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::metrics::{write_confusion, write_metrics};

const MODEL_INIT_STREAM: u64 = 0x6d6f64;
const CLUSTER_STREAM: u64 = 0x636c75;
const EVAL_CLUSTER_STREAM: u64 = 0x45564c;
const EVAL_SAMPLE_STREAM: u64 = 0x455653;

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?;
    let (train, test) =
        dataset::write_synth_splits(out, cfg.classes, cfg.frames_per_class, cfg.seed)?;
    println!(
        "synth: wrote {} train frames to {} and {} test frames to {}",
        train,
        out.join("train").display(),
        test,
        out.join("test").display()
    );
    Ok(())
}

pub fn cmd_cluster(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.dataset_dir()?;
    let data = load_dataset(dir)?;
    let k = cfg.views.count();
    let mut per_class = Vec::with_capacity(data.manifest.num_classes);
    for class in 0..data.manifest.num_classes {
        let idx = data.frame_indices_of_class(class);
        let refs: Vec<&[f32]> = idx
            .iter()
            .map(|&i| data.frames[i].pressure.as_slice())
            .collect();
        let assignment = cluster_frames(
            &refs,
            k,
            Rng::seed_stream(cfg.seed, CLUSTER_STREAM ^ class as u64).next_u64(),
        )
        .map_err(|e| match e {
            Error::Dataset(DatasetError::TooFewFrames { have, need, .. }) => {
                Error::from(DatasetError::TooFewFrames {
                    class,
                    have,
                    need,
                })
            }
            other => other,
        })?;
        per_class.push((class, idx, assignment));
    }
    dataset::save_clusters(dir, k, cfg.seed, &per_class)?;
    println!(
        "cluster: wrote {} with k = {k} for {} classes",
        dir.join("clusters.json").display(),
        per_class.len()
    );
    Ok(())
}

fn backbone_ckpt_paths(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let path = match &cfg.backbone_checkpoint {
        Some(p) => p.clone(),
        None => cfg.out_dir()?.join("backbone.tvgc"),
    };
    let meta = meta_path(&path);
    Ok((path, meta))
}

fn model_ckpt_paths(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let path = match &cfg.checkpoint {
        Some(p) => p.clone(),
        None => cfg.out_dir()?.join("model.tvgc"),
    };
    let meta = meta_path(&path);
    Ok((path, meta))
}

fn meta_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    ckpt.with_file_name(name)
}

fn save_with_state<T: tvgcn_core::scalar::Scalar>(
    path: &Path,
    named: Vec<(String, &Tensor<T>)>,
    optimizer: &SgdMomentum<T>,
) -> Result<()> {
    let params: Vec<(String, &Tensor<T>)> = named
        .iter()
        .filter(|(_, t)| t.is_param())
        .map(|(n, t)| (n.clone(), *t))
        .collect();
    let state = optimizer.export_state(&params);
    let mut entries = named;
    for (name, t) in &state {
        entries.push((name.clone(), t));
    }
    checkpoint::save(path, &entries)
}

pub fn cmd_train_backbone(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    let data = load_dataset(cfg.dataset_dir()?)?;
    let num_classes = data.manifest.num_classes;

    let mut rng = Rng::seed_stream(cfg.seed, MODEL_INIT_STREAM);
    let mut bcfg = BackboneConfig::new(cfg.backbone.to_core(), num_classes);
    bcfg.feature_dim = cfg.resolved_feature_dim();
    let mut model = Backbone::<f32>::new(bcfg, &mut rng)?;
    let mut optimizer = SgdMomentum::new(cfg.momentum, cfg.weight_decay)?;

    let mut start_epoch = 0;
    if let Some(resume) = &cfg.resume {
        let saved = checkpoint::load_map(resume)?;
        let meta = checkpoint::load_meta(&meta_path(resume))?;
        cfg.check_arch(&meta.extra, num_classes)?;
        checkpoint::restore_into(&saved, &mut model.named_mut("backbone"))?;
        let params: Vec<(String, &Tensor<f32>)> = model
            .named("backbone")
            .into_iter()
            .filter(|(_, t)| t.is_param())
            .collect();
        optimizer.import_state(&params, &saved);
        start_epoch = meta.epoch;
    }

    let params = BackboneTrainParams {
        epochs: cfg.epochs_backbone,
        start_epoch,
        batch_size: cfg.batch_size,
        base_lr: cfg.lr_stage1,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        target_accuracy: None,
    };
    let stats = train_backbone(&mut model, &mut optimizer, &data, &params)?;
    write_metrics(&out.join("metrics.csv"), &stats)?;

    let (ckpt, meta) = backbone_ckpt_paths(cfg)?;
    save_with_state(&ckpt, model.named("backbone"), &optimizer)?;
    checkpoint::save_meta(
        &meta,
        &CheckpointMeta {
            epoch: cfg.epochs_backbone,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            extra: cfg.arch_fields(num_classes),
        },
    )?;
    if let Some(last) = stats.last() {
        println!(
            "train-backbone: {} epochs, final train loss {:.4}, accuracy {:.4}",
            cfg.epochs_backbone, last.loss, last.accuracy
        );
    }
    println!("train-backbone: checkpoint {}", ckpt.display());
    Ok(())
}

fn build_joint(cfg: &RunConfig, num_classes: usize) -> Result<JointModel<f32>> {
    let mut rng = Rng::seed_stream(cfg.seed, MODEL_INIT_STREAM);
    let mut bcfg = BackboneConfig::new(cfg.backbone.to_core(), num_classes);
    bcfg.feature_dim = cfg.resolved_feature_dim();
    let mut gcfg = GcnConfig::new(cfg.views.count(), cfg.resolved_feature_dim(), num_classes);
    gcfg.levels = cfg.levels;
    gcfg.n_neighbors = cfg.resolved_n_neighbors();
    gcfg.selector_hidden = cfg.selector_hidden;
    gcfg.leaky_slope = cfg.leaky_slope;
    gcfg.fps_seed = cfg.fps_seed;
    gcfg.view_loss_weight = cfg.view_loss_weight;
    gcfg.share_relation = cfg.share_relation_mlp;
    JointModel::new(bcfg, gcfg, &mut rng)
}

fn load_view_source(cfg: &RunConfig, data: &Dataset) -> Result<ViewSetSource> {
    let dir = cfg.dataset_dir()?;
    let clusters_path = dir.join("clusters.json");
    if !clusters_path.exists() {
        return Err(Error::config(
            "train",
            format!(
                "missing cluster assignment {}; run the cluster command first",
                clusters_path.display()
            ),
        ));
    }
    let clusters = load_clusters(dir)?;
    ViewSetSource::from_dataset(data, &clusters, cfg.viewpoints())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    let data = load_dataset(cfg.dataset_dir()?)?;
    let num_classes = data.manifest.num_classes;
    let source = load_view_source(cfg, &data)?;

    let mut model = build_joint(cfg, num_classes)?;
    let mut optimizer = SgdMomentum::new(cfg.momentum, cfg.weight_decay)?;
    let mut start_epoch = 0;

    if let Some(resume) = &cfg.resume {
        let saved = checkpoint::load_map(resume)?;
        let meta = checkpoint::load_meta(&meta_path(resume))?;
        cfg.check_arch(&meta.extra, num_classes)?;
        checkpoint::restore_into(&saved, &mut model.named_mut())?;
        let params = model.named_params();
        optimizer.import_state(&params, &saved);
        start_epoch = meta.epoch;
    } else {
        let (bb_ckpt, bb_meta) = backbone_ckpt_paths(cfg)?;
        if !bb_ckpt.exists() {
            return Err(Error::config(
                "train",
                format!(
                    "stage-1 checkpoint {} not found; run train-backbone first",
                    bb_ckpt.display()
                ),
            ));
        }
        let saved = checkpoint::load_map(&bb_ckpt)?;
        let meta = checkpoint::load_meta(&bb_meta)?;
        cfg.check_arch(&meta.extra, num_classes)?;
        checkpoint::restore_into(&saved, &mut model.backbone.named_mut("backbone"))?;
    }

    let params = JointTrainParams {
        epochs: cfg.epochs_joint,
        start_epoch,
        batch_size: cfg.batch_size,
        lr_backbone: cfg.lr_backbone,
        lr_gcn: cfg.lr_gcn,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
        samples_per_class: cfg.joint_samples_per_class,
        eval_samples_per_class: cfg.eval_samples_per_class,
        target_test_accuracy: None,
    };
    let stats = train_joint(&mut model, &mut optimizer, &source, None, &params)?;
    write_metrics(&out.join("metrics.csv"), &stats)?;

    let (ckpt, meta) = model_ckpt_paths(cfg)?;
    save_with_state(&ckpt, model.named(), &optimizer)?;
    checkpoint::save_meta(
        &meta,
        &CheckpointMeta {
            epoch: cfg.epochs_joint,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            extra: cfg.arch_fields(num_classes),
        },
    )?;
    if let Some(last) = stats.last() {
        println!(
            "train: {} epochs, final train loss {:.4}, accuracy {:.4}",
            cfg.epochs_joint, last.loss, last.accuracy
        );
    }
    println!("train: checkpoint {}", ckpt.display());
    Ok(())
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub per_trial: Vec<f64>,
    pub overall: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    let data = load_dataset(cfg.dataset_dir()?)?;
    let (ckpt, meta_file) = model_ckpt_paths(cfg)?;
    let saved = checkpoint::load_map(&ckpt)?;
    let meta = checkpoint::load_meta(&meta_file)?;
    let num_classes = data.manifest.num_classes;
    cfg.check_arch(&meta.extra, num_classes)?;

    let mut model = build_joint(cfg, num_classes)?;
    checkpoint::restore_into(&saved, &mut model.named_mut())?;

    let trials = cfg.trials.max(1);
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut per_trial = Vec::with_capacity(trials);
    for trial in 0..trials {
        let source = ViewSetSource::cluster_dataset(
            &data,
            cfg.viewpoints(),
            Rng::seed_stream(cfg.seed, EVAL_CLUSTER_STREAM ^ trial as u64).next_u64(),
        )?;
        let mut rng = Rng::seed_stream(cfg.seed, EVAL_SAMPLE_STREAM ^ (trial as u64) << 8);
        let (acc, _loss, c) = eval_joint(&model, &source, cfg.eval_samples_per_class, &mut rng)?;
        per_trial.push(acc);
        for (dst, src) in confusion.iter_mut().zip(&c) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
    }
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    let total: usize = confusion.iter().flatten().sum();
    Ok(EvalOutcome {
        per_trial,
        overall: correct as f64 / total.max(1) as f64,
        confusion,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let outcome = run_eval(cfg)?;
    for (t, acc) in outcome.per_trial.iter().enumerate() {
        println!("trial {t}: accuracy {acc:.6}");
    }
    let mean: f64 = outcome.per_trial.iter().sum::<f64>() / outcome.per_trial.len() as f64;
    println!("mean over {} trials: {mean:.6}", outcome.per_trial.len());
    println!("accuracy: {:.6}", outcome.overall);

    let confusion_path = match &cfg.confusion {
        Some(p) => p.clone(),
        None => cfg.out_dir()?.join("confusion.csv"),
    };
    if let Some(parent) = confusion_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_confusion(&confusion_path, &outcome.confusion)?;
    println!("confusion matrix: {}", confusion_path.display());
    Ok(())
}

pub fn format_gradcheck_report(report: &GradcheckReport) -> String {
    let mut out = String::new();
    for g in &report.groups {
        out.push_str(&format!(
            "group {:>18}: rel err {:.3e} over {} coords (worst coord {:.3e} at {})\n",
            g.name, g.rel_err, g.coords_checked, g.worst_coord_err, g.worst_location
        ));
    }
    if report.refined_probes > 0 {
        out.push_str(&format!(
            "{} probes re-measured at a finer step (nonsmooth probe window)\n",
            report.refined_probes
        ));
    }
    out
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    // tiny preset forced: the checker builds its own tiny double-precision
    // model; only the seed and coordinate budget come from the config.
    let report = check_joint_model(cfg.seed, cfg.gradcheck_coords, None)?;
    print!("{}", format_gradcheck_report(&report));
    if report.all_passed(GROUP_TOLERANCE) {
        println!("gradcheck: PASS (all groups below {GROUP_TOLERANCE:.0e})");
        Ok(())
    } else {
        let names: Vec<&str> = report
            .failing(GROUP_TOLERANCE)
            .iter()
            .map(|g| g.name.as_str())
            .collect();
        Err(Error::config(
            "gradcheck",
            format!("groups above tolerance: {}", names.join(", ")),
        ))
    }
}

/// Shared by tests: runs eval byte-deterministically into memory.
pub fn confusion_bytes(confusion: &[Vec<usize>]) -> Vec<u8> {
    crate::metrics::confusion_to_csv(confusion).into_bytes()
}

/// Re-exported for integration tests that need direct access to saved maps.
pub fn load_checkpoint_map(path: &Path) -> Result<HashMap<String, Tensor<f32>>> {
    checkpoint::load_map(path)
}
