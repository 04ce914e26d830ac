//! Training and evaluation loops.
//!
//! Stage 1 trains the backbone classifier on single frames; stage 2 trains
//! the joint model on clustered view-sets with separate learning rates for
//! the backbone and the graph components. Per-epoch randomness derives from
//! (seed, epoch), so resuming from a checkpoint replays the exact same
//! stream as an uninterrupted run.

use std::time::Instant;

use crate::backbone::Backbone;
use crate::dataset::{sample_view_set, ClusterAssignment, Dataset, ClustersFile};
use crate::error::{DatasetError, Error, Result};
use crate::gcn::GcnOutput;
use crate::model::JointModel;
use crate::nn::{apply_bn_updates, BnUpdates};
use crate::optim::{lr_at_epoch, SgdMomentum};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape};
use crate::viewgraph::Viewpoint;

const STAGE1_STREAM: u64 = 0x5331;
const STAGE2_STREAM: u64 = 0x5332;
const EVAL_STREAM: u64 = 0x4556;

/// One metrics row. `lr_gcn` is zero during stage-1 training.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BackboneTrainParams {
    pub epochs: u32,
    pub start_epoch: u32,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for BackboneTrainParams {
    fn default() -> Self {
        BackboneTrainParams {
            epochs: 30,
            start_epoch: 0,
            batch_size: 32,
            base_lr: 5e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            target_accuracy: None,
        }
    }
}

fn batch_tensor<T: Scalar>(frames: &[&[f32]]) -> (Vec<usize>, Vec<T>) {
    let mut data = Vec::with_capacity(frames.len() * 1024);
    for f in frames {
        data.extend(f.iter().map(|v| T::from_f64(*v as f64)));
    }
    (vec![frames.len(), 1, 32, 32], data)
}

fn argmax_rows<T: Scalar>(logits: &[T], cols: usize) -> Vec<usize> {
    logits
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode loss and accuracy of the backbone classifier over a dataset.
pub fn eval_backbone<T: Scalar>(
    model: &Backbone<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let n = data.frames.len();
    if n == 0 {
        return Err(Error::config("eval_backbone", "empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut idx = 0;
    while idx < n {
        let end = (idx + batch_size).min(n);
        let frames: Vec<&[f32]> = (idx..end)
            .map(|i| data.frames[i].pressure.as_slice())
            .collect();
        let labels: Vec<usize> = (idx..end).map(|i| data.frames[i].label).collect();
        let (shape, payload) = batch_tensor::<T>(&frames);
        let mut tape = Tape::new();
        let mut sink = BnUpdates::new();
        let x = tape.constant(shape, payload)?;
        let logits = model.forward_logits(&mut tape, x, Mode::Eval, &mut sink)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        loss_sum += tape.value(loss)[0].to_f64() * labels.len() as f64;
        let cols = model.config.num_classes;
        for (pred, want) in argmax_rows(tape.value(logits), cols).iter().zip(&labels) {
            if pred == want {
                correct += 1;
            }
        }
        idx = end;
    }
    Ok((loss_sum / n as f64, correct as f64 / n as f64))
}

/// Stage-1 training: backbone classifier on single frames, LR halving every
/// ten epochs. Returns one row per epoch plus an initial eval row when
/// starting from scratch.
pub fn train_backbone<T: Scalar>(
    model: &mut Backbone<T>,
    optimizer: &mut SgdMomentum<T>,
    data: &Dataset,
    params: &BackboneTrainParams,
) -> Result<Vec<EpochStats>> {
    if data.manifest.num_classes != model.config.num_classes {
        return Err(Error::config(
            "train_backbone",
            format!(
                "dataset has {} classes, model expects {}",
                data.manifest.num_classes, model.config.num_classes
            ),
        ));
    }
    if params.batch_size < 2 {
        return Err(Error::config(
            "train_backbone",
            "batch_size must be >= 2 for batch normalization",
        ));
    }
    let start = Instant::now();
    let n = data.frames.len();
    let mut stats = Vec::new();

    if params.start_epoch == 0 {
        let (loss, acc) = eval_backbone(model, data, params.batch_size)?;
        stats.push(EpochStats {
            epoch: 0,
            split: "train".into(),
            loss,
            accuracy: acc,
            lr_backbone: lr_at_epoch(params.base_lr, 0),
            lr_gcn: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    for epoch in params.start_epoch + 1..=params.epochs {
        let lr = lr_at_epoch(params.base_lr, epoch - 1);
        let mut rng = Rng::seed_stream(params.seed, STAGE1_STREAM ^ u64::from(epoch));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(params.batch_size) {
            if chunk.len() < 2 {
                continue; // batch norm needs at least two frames
            }
            let frames: Vec<&[f32]> = chunk
                .iter()
                .map(|&i| data.frames[i].pressure.as_slice())
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.frames[i].label).collect();
            let (shape, payload) = batch_tensor::<T>(&frames);

            let mut tape = Tape::new();
            let mut sink = BnUpdates::new();
            let x = tape.constant(shape, payload)?;
            let logits = model.forward_logits(&mut tape, x, Mode::Train, &mut sink)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;

            for (_, p) in model.named_mut("backbone") {
                if !p.is_param() {
                    continue;
                }
                let uid = p.uid();
                if let Some(g) = tape.param_grad(uid) {
                    let g = g.to_vec();
                    p.accumulate_grad(&g);
                }
            }
            apply_bn_updates(&mut sink, &mut model.bn_layers_mut())?;

            loss_sum += tape.value(loss)[0].to_f64() * labels.len() as f64;
            let cols = model.config.num_classes;
            for (pred, want) in argmax_rows(tape.value(logits), cols).iter().zip(&labels) {
                if pred == want {
                    correct += 1;
                }
            }
            seen += labels.len();

            optimizer.step(&mut model.params_mut(), lr)?;
            model.zero_grad();
        }

        let accuracy = correct as f64 / seen.max(1) as f64;
        stats.push(EpochStats {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen.max(1) as f64,
            accuracy,
            lr_backbone: lr,
            lr_gcn: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(target) = params.target_accuracy {
            if accuracy >= target {
                break;
            }
        }
    }
    Ok(stats)
}

// ── view-set sources ────────────────────────────────────────────────────

/// Frames of one class with its cluster assignment; positions in `frames`
/// align with `assignment.assignments`.
#[derive(Debug, Clone)]
pub struct ClassViews {
    pub label: usize,
    pub frames: Vec<Vec<f32>>,
    pub assignment: ClusterAssignment,
}

/// Everything stage-2 needs to draw view-set samples.
#[derive(Debug, Clone)]
pub struct ViewSetSource {
    pub viewpoints: Vec<Viewpoint>,
    pub classes: Vec<ClassViews>,
}

impl ViewSetSource {
    /// Assembles the source from a loaded dataset and its saved clusters.
    pub fn from_dataset(
        data: &Dataset,
        clusters: &ClustersFile,
        viewpoints: Vec<Viewpoint>,
    ) -> Result<Self> {
        if clusters.k != viewpoints.len() {
            return Err(Error::config(
                "view_set_source",
                format!(
                    "clusters built for k = {} but layout has {} viewpoints",
                    clusters.k,
                    viewpoints.len()
                ),
            ));
        }
        let mut classes = Vec::with_capacity(clusters.classes.len());
        for record in &clusters.classes {
            let mut frames = Vec::with_capacity(record.frame_indices.len());
            for &gi in &record.frame_indices {
                let frame = data.frames.get(gi).ok_or_else(|| {
                    Error::from(DatasetError::Other(format!(
                        "clusters.json references frame {gi} beyond dataset ({} frames)",
                        data.frames.len()
                    )))
                })?;
                if frame.label != record.class {
                    return Err(DatasetError::Other(format!(
                        "frame {gi} has label {} but clusters.json lists it under class {}",
                        frame.label, record.class
                    ))
                    .into());
                }
                frames.push(frame.pressure.clone());
            }
            classes.push(ClassViews {
                label: record.class,
                frames,
                assignment: ClusterAssignment {
                    k: clusters.k,
                    assignments: record.cluster_of.clone(),
                    centroids: Vec::new(),
                    cluster_to_viewpoint: record.cluster_to_viewpoint.clone(),
                    objective_history: Vec::new(),
                },
            });
        }
        Ok(ViewSetSource {
            viewpoints,
            classes,
        })
    }

    /// Clusters every class of a dataset in memory (used by evaluation,
    /// which re-clusters per trial).
    pub fn cluster_dataset(
        data: &Dataset,
        viewpoints: Vec<Viewpoint>,
        seed: u64,
    ) -> Result<Self> {
        let k = viewpoints.len();
        let mut classes = Vec::with_capacity(data.manifest.num_classes);
        for class in 0..data.manifest.num_classes {
            let idx = data.frame_indices_of_class(class);
            let refs: Vec<&[f32]> = idx
                .iter()
                .map(|&i| data.frames[i].pressure.as_slice())
                .collect();
            let assignment =
                crate::dataset::cluster_frames(&refs, k, seed ^ (class as u64) << 8).map_err(
                    |e| match e {
                        Error::Dataset(DatasetError::TooFewFrames { have, need, .. }) => {
                            Error::from(DatasetError::TooFewFrames { class, have, need })
                        }
                        other => other,
                    },
                )?;
            classes.push(ClassViews {
                label: class,
                frames: idx
                    .iter()
                    .map(|&i| data.frames[i].pressure.clone())
                    .collect(),
                assignment,
            });
        }
        Ok(ViewSetSource {
            viewpoints,
            classes,
        })
    }

    /// One view-set for a class: frames ordered by viewpoint index.
    pub fn sample(&self, class_pos: usize, rng: &mut Rng) -> Result<Vec<&[f32]>> {
        let class = &self.classes[class_pos];
        let picks = sample_view_set(&class.assignment, rng).map_err(|e| match e {
            DatasetError::EmptyCluster { cluster, .. } => {
                Error::from(DatasetError::EmptyCluster {
                    class: class.label,
                    cluster,
                })
            }
            other => other.into(),
        })?;
        Ok(picks
            .into_iter()
            .map(|p| class.frames[p].as_slice())
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct JointTrainParams {
    pub epochs: u32,
    pub start_epoch: u32,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub samples_per_class: usize,
    /// Evaluate on this many view-sets per class when a test source is
    /// supplied to `train_joint`.
    pub eval_samples_per_class: usize,
    pub target_test_accuracy: Option<f64>,
}

impl Default for JointTrainParams {
    fn default() -> Self {
        JointTrainParams {
            epochs: 15,
            start_epoch: 0,
            batch_size: 32,
            lr_backbone: 1e-4,
            lr_gcn: 5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            samples_per_class: 32,
            eval_samples_per_class: 32,
            target_test_accuracy: None,
        }
    }
}

/// Eval-mode view-set classification. Returns (accuracy, mean loss,
/// confusion matrix with rows = true class).
pub fn eval_joint<T: Scalar>(
    model: &JointModel<T>,
    source: &ViewSetSource,
    samples_per_class: usize,
    rng: &mut Rng,
) -> Result<(f64, f64, Vec<Vec<usize>>)> {
    let num_classes = model.gcn.config.num_classes;
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for class_pos in 0..source.classes.len() {
        let label = source.classes[class_pos].label;
        for _ in 0..samples_per_class {
            let frames = source.sample(class_pos, rng)?;
            let (shape, payload) = batch_tensor::<T>(&frames);
            let mut tape = Tape::new();
            let mut sink = BnUpdates::new();
            let x = tape.constant(shape, payload)?;
            let out = model.forward(&mut tape, x, &source.viewpoints, Mode::Eval, &mut sink)?;
            let loss = model.gcn.total_loss(&mut tape, &out, label)?;
            loss_sum += tape.value(loss)[0].to_f64();
            let pred = argmax_rows(tape.value(out.logits), num_classes)[0];
            confusion[label][pred] += 1;
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((
        correct as f64 / total.max(1) as f64,
        loss_sum / total.max(1) as f64,
        confusion,
    ))
}

/// Stage-2 training: joint model on clustered view-sets, two learning-rate
/// groups (backbone vs graph), the 10-epoch halving schedule applied to
/// both. When `test` is provided, each epoch appends a test row and
/// `target_test_accuracy` can stop early.
pub fn train_joint<T: Scalar>(
    model: &mut JointModel<T>,
    optimizer: &mut SgdMomentum<T>,
    train: &ViewSetSource,
    test: Option<&ViewSetSource>,
    params: &JointTrainParams,
) -> Result<Vec<EpochStats>> {
    let start = Instant::now();
    let num_classes = model.gcn.config.num_classes;
    if train.classes.is_empty() {
        return Err(Error::config("train_joint", "no classes in view-set source"));
    }
    let mut stats = Vec::new();

    if params.start_epoch == 0 {
        let mut rng = Rng::seed_stream(params.seed, STAGE2_STREAM ^ EVAL_STREAM);
        let (acc, loss, _) = eval_joint(model, train, params.samples_per_class.min(8), &mut rng)?;
        stats.push(EpochStats {
            epoch: 0,
            split: "train".into(),
            loss,
            accuracy: acc,
            lr_backbone: lr_at_epoch(params.lr_backbone, 0),
            lr_gcn: lr_at_epoch(params.lr_gcn, 0),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    for epoch in params.start_epoch + 1..=params.epochs {
        let lr_b = lr_at_epoch(params.lr_backbone, epoch - 1);
        let lr_g = lr_at_epoch(params.lr_gcn, epoch - 1);
        let mut rng = Rng::seed_stream(params.seed, STAGE2_STREAM ^ u64::from(epoch));

        // one epoch's sample plan: samples_per_class view-sets per class
        let mut plan: Vec<usize> = (0..train.classes.len())
            .flat_map(|c| std::iter::repeat_n(c, params.samples_per_class))
            .collect();
        rng.shuffle(&mut plan);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in plan.chunks(params.batch_size) {
            let scale = T::from_f64(1.0 / chunk.len() as f64);
            for &class_pos in chunk {
                let label = train.classes[class_pos].label;
                let frames = train.sample(class_pos, &mut rng)?;
                let (shape, payload) = batch_tensor::<T>(&frames);
                let mut tape = Tape::new();
                let mut sink = BnUpdates::new();
                let x = tape.constant(shape, payload)?;
                // Stage 2 runs the backbone in eval mode: its statistics
                // were calibrated over mixed-class batches in stage 1, a
                // view-set batch holds one class only, and training on
                // statistics that inference will not see opens a train/eval
                // gap. Weights, scales and shifts all keep training. The
                // graph norms run tracked: they normalize with running
                // statistics in every mode and update them while training.
                let feats =
                    model
                        .backbone
                        .forward_features(&mut tape, x, Mode::Eval, &mut sink)?;
                let out: GcnOutput = model.gcn.forward(
                    &mut tape,
                    feats,
                    &train.viewpoints,
                    Mode::Train,
                    &mut sink,
                )?;
                let loss = model.gcn.total_loss(&mut tape, &out, label)?;
                tape.backward(loss)?;
                model.accumulate_grads_from(&tape, scale);
                model.apply_bn_updates(&mut sink)?;

                loss_sum += tape.value(loss)[0].to_f64();
                let pred = argmax_rows(tape.value(out.logits), num_classes)[0];
                if pred == label {
                    correct += 1;
                }
                seen += 1;
            }
            optimizer.step(&mut model.backbone_params_mut(), lr_b)?;
            optimizer.step(&mut model.gcn_params_mut(), lr_g)?;
            model.zero_grad();
        }

        stats.push(EpochStats {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen.max(1) as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
            lr_backbone: lr_b,
            lr_gcn: lr_g,
            wall_seconds: start.elapsed().as_secs_f64(),
        });

        if let Some(test_source) = test {
            let mut eval_rng =
                Rng::seed_stream(params.seed, EVAL_STREAM ^ (u64::from(epoch) << 16));
            let (acc, loss, _) = eval_joint(
                model,
                test_source,
                params.eval_samples_per_class,
                &mut eval_rng,
            )?;
            stats.push(EpochStats {
                epoch,
                split: "test".into(),
                loss,
                accuracy: acc,
                lr_backbone: lr_b,
                lr_gcn: lr_g,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            if let Some(target) = params.target_test_accuracy {
                if acc >= target {
                    break;
                }
            }
        }
    }
    Ok(stats)
}
