//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured numbers. Run with `cargo test -p tvgcn-cli --test acceptance`
//! (add `-- --nocapture` to see the PASS lines of successful criteria).

use std::path::{Path, PathBuf};
use std::time::Instant;

use tvgcn_cli::commands;
use tvgcn_cli::config::{BackbonePreset, RunConfig};
use tvgcn_core::backbone::{Backbone, BackboneConfig, Preset};
use tvgcn_core::dataset::{cluster_frames, load_dataset, write_synth_splits, Dataset};
use tvgcn_core::gcn::{furthest_point_sampling, GcnConfig, ViewGcn};
use tvgcn_core::gradcheck::{check_joint_model, GROUP_TOLERANCE};
use tvgcn_core::harness::{
    eval_joint, train_backbone, train_joint, BackboneTrainParams, ClassViews, JointTrainParams,
    ViewSetSource,
};
use tvgcn_core::model::JointModel;
use tvgcn_core::nn::BnUpdates;
use tvgcn_core::optim::SgdMomentum;
use tvgcn_core::rng::Rng;
use tvgcn_core::tape::{Mode, Tape};
use tvgcn_core::viewgraph::{cube_viewpoints, Viewpoint};

fn tmp(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tvgcn-acc-{tag}-{}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

// ── 1. gradient integrity ───────────────────────────────────────────────

#[test]
fn acceptance_gradient_integrity() {
    let t0 = Instant::now();
    let report = check_joint_model(0, 6, None).unwrap();
    assert_eq!(report.groups.len(), 8, "all parameter groups reported");
    for g in &report.groups {
        assert!(
            g.passed(GROUP_TOLERANCE),
            "group {} rel err {:.3e} (worst coord {:.3e} at {})",
            g.name,
            g.rel_err,
            g.worst_coord_err,
            g.worst_location
        );
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "gradcheck took {elapsed:.1}s, budget 300s");
    let worst = report
        .groups
        .iter()
        .map(|g| g.rel_err)
        .fold(0.0f64, f64::max);
    eprintln!(
        "[PASS] gradient integrity: 8 groups < 1e-3 (worst {worst:.2e}) in {elapsed:.1}s"
    );
}

// ── 2 + 3. furthest point sampling ──────────────────────────────────────

fn fps_oracle(points: &[Viewpoint], m: usize, seed: usize) -> Vec<usize> {
    let mut sel = vec![seed];
    while sel.len() < m {
        let mut best_idx = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel
                .iter()
                .map(|&s| points[i].distance(&points[s]))
                .fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best_idx = i;
            }
        }
        sel.push(best_idx);
    }
    sel
}

#[test]
fn acceptance_fps_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = Rng::seed(2024);
    let mut cases = 0usize;
    for _ in 0..200 {
        let n = 2 + rng.next_usize(9); // N <= 10
        let pts: Vec<Viewpoint> = (0..n)
            .map(|_| {
                Viewpoint::new(
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                )
            })
            .collect();
        for seed in 0..n {
            for m in 1..=n {
                assert_eq!(
                    furthest_point_sampling(&pts, m, seed).unwrap(),
                    fps_oracle(&pts, m, seed),
                    "n={n} m={m} seed={seed}"
                );
                cases += 1;
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "fps oracle sweep took {elapsed:.1}s");
    eprintln!(
        "[PASS] fps oracle equivalence: {cases} cases over 200 point sets, exact, {elapsed:.2}s"
    );
}

#[test]
fn acceptance_cube_fps_fixture() {
    let got = furthest_point_sampling(&cube_viewpoints(), 4, 0).unwrap();
    assert_eq!(got, vec![0, 7, 1, 2]);
    eprintln!("[PASS] cube fps fixture: seed 0, m 4 -> 0,7,1,2");
}

// ── 4. joint-permutation invariance ─────────────────────────────────────

#[test]
fn acceptance_joint_permutation_invariance() {
    let num_classes = 5;
    let pts = cube_viewpoints();
    let mut pairing_sensitive = 0usize;

    for draw in 0..50u64 {
        let mut rng = Rng::seed_stream(4242, draw);
        let bcfg = BackboneConfig::new(Preset::Tiny, num_classes);
        let gcfg = GcnConfig::new(8, bcfg.feature_dim, num_classes);
        let model = JointModel::<f32>::new(bcfg, gcfg, &mut rng).unwrap();
        let frames: Vec<f32> = (0..8 * 1024).map(|_| rng.next_f64() as f32).collect();

        let run = |frames: &[f32], pts: &[Viewpoint]| {
            let mut tape = Tape::new();
            let mut sink = BnUpdates::new();
            let x = tape.constant(vec![8, 1, 32, 32], frames.to_vec()).unwrap();
            let out = model.forward(&mut tape, x, pts, Mode::Eval, &mut sink).unwrap();
            (
                tape.value(out.descriptor).to_vec(),
                tape.value(out.logits).to_vec(),
            )
        };
        let (desc0, logits0) = run(&frames, &pts);

        // joint permutation: frames and viewpoint assignments move together
        let mut perm: Vec<usize> = (0..8).collect();
        rng.shuffle(&mut perm);
        let frames_p: Vec<f32> = perm
            .iter()
            .flat_map(|&i| frames[i * 1024..(i + 1) * 1024].to_vec())
            .collect();
        let pts_p: Vec<Viewpoint> = perm.iter().map(|&i| pts[i]).collect();
        let (desc_p, logits_p) = run(&frames_p, &pts_p);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&desc0), bits(&desc_p), "draw {draw}: descriptor moved");
        assert_eq!(bits(&logits0), bits(&logits_p), "draw {draw}: logits moved");

        // frame-only permutation: the pairing breaks, logits should move
        if !perm.iter().enumerate().all(|(i, p)| i == *p) {
            let (_, logits_b) = run(&frames_p, &pts);
            let max_diff = logits0
                .iter()
                .zip(&logits_b)
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0, f64::max);
            if max_diff > 1e-6 {
                pairing_sensitive += 1;
            }
        }
    }
    assert!(
        pairing_sensitive > 0,
        "at least one frame-only permutation must change the logits"
    );
    eprintln!(
        "[PASS] joint-permutation invariance: 50 draws bit-identical; {pairing_sensitive} frame-only permutations moved the logits"
    );
}

// ── 5. loss calibration at init ─────────────────────────────────────────

#[test]
fn acceptance_loss_calibration_at_init() {
    let num_classes = 26;
    let mut rng = Rng::seed(7);
    let bcfg = BackboneConfig::new(Preset::Tiny, num_classes);
    let gcfg = GcnConfig::new(8, bcfg.feature_dim, num_classes);
    let mut model = JointModel::<f64>::new(bcfg, gcfg, &mut rng).unwrap();
    // near-uniform logits: scale every classification head down
    for (name, t) in model.named_mut() {
        if name.contains("classifier") || (name.contains("selector") && name.contains(".out")) {
            let data: Vec<f64> = t.data().iter().map(|v| v * 0.01).collect();
            t.set_data(&data).unwrap();
        }
    }

    let frames: Vec<f64> = (0..8 * 1024).map(|_| rng.next_f64()).collect();
    let mut tape = Tape::new();
    let mut sink = BnUpdates::new();
    let x = tape.constant(vec![8, 1, 32, 32], frames).unwrap();
    let out = model
        .forward(&mut tape, x, &cube_viewpoints(), Mode::Train, &mut sink)
        .unwrap();

    let expect = (num_classes as f64).ln();
    let label = 13;
    let shape = tape.softmax_cross_entropy(out.logits, &[label]).unwrap();
    let shape_loss = tape.value(shape)[0];
    assert!(
        (shape_loss - expect).abs() < 0.1 * expect,
        "shape loss {shape_loss} vs ln26 = {expect}"
    );

    let ce = |row: &[f64]| -> f64 {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        denom.ln() - (row[label] - mx)
    };
    let mut terms = 0usize;
    let mut worst: f64 = 0.0;
    for rec in &out.selector_records {
        for row in tape.value(rec.logits).chunks_exact(num_classes) {
            let term = ce(row);
            worst = worst.max((term - expect).abs() / expect);
            assert!(
                (term - expect).abs() < 0.1 * expect,
                "view term {term} vs ln26 = {expect}"
            );
            terms += 1;
        }
    }
    assert_eq!(terms, 24, "default 8-view hierarchy has 24 view terms");
    eprintln!(
        "[PASS] loss calibration: shape {shape_loss:.4} ~ ln26 = {expect:.4}; 24 view terms within 10% (worst {:.1}%)",
        worst * 100.0
    );
}

// ── 6. desk-scale learning ──────────────────────────────────────────────

fn cluster_source(data: &Dataset, pts: &[Viewpoint], seed: u64) -> ViewSetSource {
    let k = pts.len();
    let classes = (0..data.manifest.num_classes)
        .map(|class| {
            let idx = data.frame_indices_of_class(class);
            let refs: Vec<&[f32]> = idx
                .iter()
                .map(|&i| data.frames[i].pressure.as_slice())
                .collect();
            let assignment = cluster_frames(&refs, k, seed ^ (class as u64) << 4).unwrap();
            ClassViews {
                label: class,
                frames: idx
                    .iter()
                    .map(|&i| data.frames[i].pressure.clone())
                    .collect(),
                assignment,
            }
        })
        .collect();
    ViewSetSource {
        viewpoints: pts.to_vec(),
        classes,
    }
}

/// Eval-mode backbone features for every frame of a dataset.
fn features_of(model: &Backbone<f32>, data: &Dataset) -> Vec<Vec<f32>> {
    data.frames
        .iter()
        .map(|f| {
            let mut tape = Tape::new();
            let mut sink = BnUpdates::new();
            let x = tape
                .constant(vec![1, 1, 32, 32], f.pressure.clone())
                .unwrap();
            let feats = model
                .forward_features(&mut tape, x, Mode::Eval, &mut sink)
                .unwrap();
            tape.value(feats).to_vec()
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        dot += *x as f64 * *y as f64;
        na += (*x as f64).powi(2);
        nb += (*y as f64).powi(2);
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-12)
}

#[test]
fn acceptance_desk_scale_learning() {
    let t0 = Instant::now();
    let root = tmp("desk");
    let seed = 0u64;
    write_synth_splits(&root, 4, 200, seed).unwrap();
    let train = load_dataset(&root.join("train")).unwrap();
    let test = load_dataset(&root.join("test")).unwrap();

    // stage 1 on single frames
    let mut rng = Rng::seed_stream(seed, 0xACCE);
    let bcfg = BackboneConfig::new(Preset::Tiny, 4);
    let gcfg = GcnConfig::new(8, bcfg.feature_dim, 4);
    let mut model = JointModel::<f32>::new(bcfg, gcfg, &mut rng).unwrap();
    let mut optimizer = SgdMomentum::new(0.9, 1e-4).unwrap();
    let stage1 = BackboneTrainParams {
        epochs: 30,
        target_accuracy: Some(0.95),
        seed,
        ..BackboneTrainParams::default()
    };
    let stats1 = train_backbone(&mut model.backbone, &mut optimizer, &train, &stage1).unwrap();
    let last1 = stats1.last().unwrap();
    assert!(
        last1.accuracy >= 0.95,
        "stage 1 reached only {:.3} train accuracy after {} epochs",
        last1.accuracy,
        last1.epoch
    );

    // learned features separate the classes on held-out frames
    let feats = features_of(&model.backbone, &test);
    let (mut same, mut same_n, mut cross, mut cross_n) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..feats.len() {
        for j in i + 1..feats.len() {
            let c = cosine(&feats[i], &feats[j]);
            if test.frames[i].label == test.frames[j].label {
                same += c;
                same_n += 1;
            } else {
                cross += c;
                cross_n += 1;
            }
        }
    }
    let (same_mean, cross_mean) = (same / same_n as f64, cross / cross_n as f64);
    assert!(
        same_mean > cross_mean,
        "same-class cosine {same_mean:.3} must exceed cross-class {cross_mean:.3}"
    );

    // stage 2 on clustered view-sets
    let pts = cube_viewpoints();
    let train_source = cluster_source(&train, &pts, seed);
    let test_source = cluster_source(&test, &pts, seed ^ 0xFE);
    // Desk-scale stage 2: smaller batches give the 128-sample epochs enough
    // optimizer steps, and the graph head takes a desk-scale rate; the
    // criterion pins the epoch budget and the accuracy bar, not these knobs.
    let stage2 = JointTrainParams {
        epochs: 15,
        seed,
        batch_size: 8,
        lr_gcn: 5e-3,
        samples_per_class: 32,
        eval_samples_per_class: 32,
        target_test_accuracy: Some(0.90),
        ..JointTrainParams::default()
    };
    let stats2 = train_joint(
        &mut model,
        &mut optimizer,
        &train_source,
        Some(&test_source),
        &stage2,
    )
    .unwrap();
    let best_test = stats2
        .iter()
        .filter(|s| s.split == "test")
        .map(|s| s.accuracy)
        .fold(0.0f64, f64::max);
    assert!(
        best_test >= 0.90,
        "stage 2 reached only {best_test:.3} test accuracy within 15 epochs"
    );

    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 900.0, "desk-scale run took {elapsed:.0}s, budget 900s");
    eprintln!(
        "[PASS] desk-scale learning: stage1 {:.1}% train acc at epoch {}, cosine {:.3} > {:.3}, stage2 {:.1}% test acc, {elapsed:.0}s",
        last1.accuracy * 100.0,
        last1.epoch,
        same_mean,
        cross_mean,
        best_test * 100.0
    );
    std::fs::remove_dir_all(&root).ok();
}

// ── 7. aggregation ablation ─────────────────────────────────────────────

/// Trains an aggregation head over frozen per-frame features and returns
/// its view-set test accuracy. `use_hierarchy` switches between the full
/// graph aggregation and a max-pool baseline.
fn train_aggregator_on_features(
    train_feats: &[Vec<f32>],
    train_data: &Dataset,
    test_feats: &[Vec<f32>],
    test_data: &Dataset,
    use_hierarchy: bool,
    seed: u64,
) -> f64 {
    use tvgcn_core::nn::{apply_bn_updates, Affine};

    let num_classes = train_data.manifest.num_classes;
    let d = train_feats[0].len();
    let pts = cube_viewpoints();
    let mut rng = Rng::seed_stream(seed, 0xAB1A);

    let feature_source = |data: &Dataset, feats: &[Vec<f32>], cseed: u64| -> ViewSetSource {
        let classes = (0..num_classes)
            .map(|class| {
                let idx = data.frame_indices_of_class(class);
                let refs: Vec<&[f32]> = idx
                    .iter()
                    .map(|&i| data.frames[i].pressure.as_slice())
                    .collect();
                let assignment = cluster_frames(&refs, 8, cseed ^ (class as u64) << 4).unwrap();
                ClassViews {
                    label: class,
                    frames: idx.iter().map(|&i| feats[i].clone()).collect(),
                    assignment,
                }
            })
            .collect();
        ViewSetSource {
            viewpoints: pts.clone(),
            classes,
        }
    };
    let train_src = feature_source(train_data, train_feats, seed);
    let test_src = feature_source(test_data, test_feats, seed ^ 0xFE);

    let mut gcn = {
        let cfg = GcnConfig::new(8, d, num_classes);
        ViewGcn::<f32>::new(cfg, &mut rng).unwrap()
    };
    let mut pool_head = Affine::<f32>::new(d, num_classes, &mut rng);
    let mut optimizer = SgdMomentum::new(0.9, 1e-4).unwrap();

    let epochs = 10;
    let samples_per_class = 24;
    for epoch in 1..=epochs {
        let mut erng = Rng::seed_stream(seed, 0xE60 ^ epoch);
        let mut plan: Vec<usize> = (0..num_classes)
            .flat_map(|c| std::iter::repeat(c).take(samples_per_class))
            .collect();
        erng.shuffle(&mut plan);
        for chunk in plan.chunks(8) {
            for &class in chunk {
                let rows = train_src.sample(class, &mut erng).unwrap();
                let flat: Vec<f32> = rows.iter().flat_map(|r| r.to_vec()).collect();
                let mut tape = Tape::new();
                let mut sink = BnUpdates::new();
                let x = tape.constant(vec![8, d], flat).unwrap();
                let label = train_src.classes[class].label;
                let loss = if use_hierarchy {
                    let out = gcn.forward(&mut tape, x, &pts, Mode::Train, &mut sink).unwrap();
                    gcn.total_loss(&mut tape, &out, label).unwrap()
                } else {
                    let pooled = tape.max_pool_rows(x).unwrap();
                    let row = tape.reshape(pooled, vec![1, d]).unwrap();
                    let logits = pool_head.forward(&mut tape, row).unwrap();
                    tape.softmax_cross_entropy(logits, &[label]).unwrap()
                };
                tape.backward(loss).unwrap();
                let scale = 1.0 / chunk.len() as f32;
                if use_hierarchy {
                    for (_, p) in gcn.named_mut("gcn") {
                        if !p.is_param() {
                            continue;
                        }
                        let uid = p.uid();
                        if let Some(g) = tape.param_grad(uid) {
                            let g = g.to_vec();
                            p.accumulate_grad_scaled(&g, scale);
                        }
                    }
                    apply_bn_updates(&mut sink, &mut gcn.bn_layers_mut()).unwrap();
                } else {
                    for p in pool_head.params_mut() {
                        let uid = p.uid();
                        if let Some(g) = tape.param_grad(uid) {
                            let g = g.to_vec();
                            p.accumulate_grad_scaled(&g, scale);
                        }
                    }
                }
            }
            if use_hierarchy {
                optimizer.step(&mut gcn.params_mut(), 5e-3).unwrap();
                gcn.zero_grad();
            } else {
                optimizer.step(&mut pool_head.params_mut(), 5e-3).unwrap();
                for p in pool_head.params_mut() {
                    p.zero_grad();
                }
            }
        }
    }

    // view-set evaluation on held-out features
    let mut erng = Rng::seed_stream(seed, 0xE7A1);
    let mut correct = 0usize;
    let mut total = 0usize;
    for class in 0..num_classes {
        for _ in 0..32 {
            let rows = test_src.sample(class, &mut erng).unwrap();
            let flat: Vec<f32> = rows.iter().flat_map(|r| r.to_vec()).collect();
            let mut tape = Tape::new();
            let mut sink = BnUpdates::new();
            let x = tape.constant(vec![8, d], flat).unwrap();
            let logits = if use_hierarchy {
                let out = gcn.forward(&mut tape, x, &pts, Mode::Eval, &mut sink).unwrap();
                tape.value(out.logits).to_vec()
            } else {
                let pooled = tape.max_pool_rows(x).unwrap();
                let row = tape.reshape(pooled, vec![1, d]).unwrap();
                let l = pool_head.forward(&mut tape, row).unwrap();
                tape.value(l).to_vec()
            };
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == test_src.classes[class].label {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn acceptance_aggregation_ablation() {
    let t0 = Instant::now();
    let root = tmp("ablation");
    let seed = 3u64;
    write_synth_splits(&root, 4, 200, seed).unwrap();
    let train = load_dataset(&root.join("train")).unwrap();
    let test = load_dataset(&root.join("test")).unwrap();

    // one shared pretrained backbone supplies frozen features to both arms
    let mut rng = Rng::seed_stream(seed, 0xB0);
    let mut backbone =
        Backbone::<f32>::new(BackboneConfig::new(Preset::Tiny, 4), &mut rng).unwrap();
    let mut optimizer = SgdMomentum::new(0.9, 1e-4).unwrap();
    let stage1 = BackboneTrainParams {
        epochs: 30,
        target_accuracy: Some(0.95),
        seed,
        ..BackboneTrainParams::default()
    };
    train_backbone(&mut backbone, &mut optimizer, &train, &stage1).unwrap();
    let train_feats = features_of(&backbone, &train);
    let test_feats = features_of(&backbone, &test);

    let mut full_accs = Vec::new();
    let mut pool_accs = Vec::new();
    for s in 0..5u64 {
        full_accs.push(train_aggregator_on_features(
            &train_feats,
            &train,
            &test_feats,
            &test,
            true,
            100 + s,
        ));
        pool_accs.push(train_aggregator_on_features(
            &train_feats,
            &train,
            &test_feats,
            &test,
            false,
            100 + s,
        ));
    }
    let full_mean: f64 = full_accs.iter().sum::<f64>() / 5.0;
    let pool_mean: f64 = pool_accs.iter().sum::<f64>() / 5.0;
    assert!(
        full_mean >= pool_mean,
        "graph aggregation mean {full_mean:.4} must be >= max-pool baseline {pool_mean:.4} \
         (full {full_accs:?} vs pool {pool_accs:?})"
    );
    eprintln!(
        "[PASS] aggregation ablation: graph {:.1}% >= max-pool {:.1}% over 5 seeds ({:.0}s)",
        full_mean * 100.0,
        pool_mean * 100.0,
        t0.elapsed().as_secs_f64()
    );
    std::fs::remove_dir_all(&root).ok();
}

// ── 8. determinism through the binary ───────────────────────────────────

fn run_bin(args: &[&str]) -> (bool, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_tvgcn"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

fn metrics_without_wall(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            cols[..cols.len() - 1].join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn acceptance_command_determinism() {
    let t0 = Instant::now();
    let root = tmp("determinism");
    let root_s = root.to_str().unwrap().to_string();
    let d = |suffix: &str| format!("{root_s}/{suffix}");

    // synth twice into separate directories
    for run in ["a", "b"] {
        let (ok, _) = run_bin(&[
            "synth",
            "--classes",
            "3",
            "--frames-per-class",
            "40",
            "--seed",
            "9",
            "--out",
            &d(&format!("synth-{run}")),
        ]);
        assert!(ok);
    }
    assert_eq!(
        dir_bytes(&root.join("synth-a")),
        dir_bytes(&root.join("synth-b")),
        "synth reruns must be byte-identical"
    );

    // cluster twice over copies of the same dataset
    for run in ["a", "b"] {
        let (ok, _) = run_bin(&[
            "cluster",
            "--seed",
            "9",
            "--dataset",
            &d(&format!("synth-{run}/train")),
        ]);
        assert!(ok);
    }
    assert_eq!(
        std::fs::read(root.join("synth-a/train/clusters.json")).unwrap(),
        std::fs::read(root.join("synth-b/train/clusters.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(root.join("synth-a/train/centroids.bin")).unwrap(),
        std::fs::read(root.join("synth-b/train/centroids.bin")).unwrap()
    );

    // two-stage training twice
    for run in ["a", "b"] {
        let (ok, _) = run_bin(&[
            "train-backbone",
            "--backbone",
            "tiny",
            "--seed",
            "9",
            "--epochs-backbone",
            "2",
            "--dataset",
            &d(&format!("synth-{run}/train")),
            "--out",
            &d(&format!("run-{run}")),
        ]);
        assert!(ok);
        let (ok, _) = run_bin(&[
            "train",
            "--backbone",
            "tiny",
            "--seed",
            "9",
            "--epochs-joint",
            "1",
            "--joint-samples-per-class",
            "4",
            "--dataset",
            &d(&format!("synth-{run}/train")),
            "--out",
            &d(&format!("run-{run}")),
        ]);
        assert!(ok);
    }
    assert_eq!(
        std::fs::read(root.join("run-a/backbone.tvgc")).unwrap(),
        std::fs::read(root.join("run-b/backbone.tvgc")).unwrap(),
        "stage-1 checkpoints must be byte-identical"
    );
    assert_eq!(
        std::fs::read(root.join("run-a/model.tvgc")).unwrap(),
        std::fs::read(root.join("run-b/model.tvgc")).unwrap(),
        "stage-2 checkpoints must be byte-identical"
    );
    assert_eq!(
        metrics_without_wall(&root.join("run-a/metrics.csv")),
        metrics_without_wall(&root.join("run-b/metrics.csv")),
        "metrics (excluding wall_seconds) must be identical"
    );

    // eval twice
    let mut eval_out = Vec::new();
    for run in ["a", "b"] {
        let (ok, stdout) = run_bin(&[
            "eval",
            "--backbone",
            "tiny",
            "--seed",
            "9",
            "--eval-samples-per-class",
            "6",
            "--trials",
            "2",
            "--dataset",
            &d(&format!("synth-{run}/test")),
            "--out",
            &d(&format!("run-{run}")),
        ]);
        assert!(ok);
        // drop the output-path line, which differs between run dirs
        let numbers: String = stdout
            .lines()
            .filter(|l| !l.contains("confusion matrix"))
            .collect::<Vec<_>>()
            .join("\n");
        eval_out.push(numbers);
    }
    assert_eq!(eval_out[0], eval_out[1], "eval numbers must be identical");
    assert_eq!(
        std::fs::read(root.join("run-a/confusion.csv")).unwrap(),
        std::fs::read(root.join("run-b/confusion.csv")).unwrap()
    );

    eprintln!(
        "[PASS] determinism: synth, cluster, train-backbone, train, eval byte-identical on rerun ({:.0}s)",
        t0.elapsed().as_secs_f64()
    );
    std::fs::remove_dir_all(&root).ok();
}

// ── 9. k-means sanity ───────────────────────────────────────────────────

#[test]
fn acceptance_kmeans_sanity() {
    let mut rng = Rng::seed(55);
    // five well-separated point-mass groups in frame space
    let k = 5;
    let mut frames: Vec<Vec<f32>> = Vec::new();
    let mut truth = Vec::new();
    for g in 0..k {
        for _ in 0..12 {
            let mut f = vec![0.0f32; 1024];
            for j in 0..30 {
                f[g * 200 + j] = 1.0 + rng.uniform(-0.005, 0.005) as f32;
            }
            frames.push(f);
            truth.push(g);
        }
    }
    let refs: Vec<&[f32]> = frames.iter().map(|f| f.as_slice()).collect();
    let got = cluster_frames(&refs, k, 77).unwrap();

    // exact recovery up to relabeling
    let mut mapping = std::collections::HashMap::new();
    let mut used = std::collections::HashSet::new();
    for (i, &t) in truth.iter().enumerate() {
        let c = got.assignments[i];
        match mapping.get(&t) {
            None => {
                assert!(used.insert(c), "cluster {c} maps to two groups");
                mapping.insert(t, c);
            }
            Some(prev) => assert_eq!(*prev, c, "group {t} split across clusters"),
        }
    }

    // Lloyd objective non-increasing at every recorded step
    for w in got.objective_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
    }
    eprintln!(
        "[PASS] k-means sanity: {k} groups recovered exactly; objective non-increasing over {} steps",
        got.objective_history.len()
    );
}

// ── optional: full protocol on a converted large dataset ────────────────

#[test]
fn acceptance_stag_protocol_optional() {
    let Some(dir) = std::env::var_os("TVGCN_STAG_DIR") else {
        eprintln!(
            "[SKIP] large-scale protocol: set TVGCN_STAG_DIR to a converted dataset root \
             (train/ and test/ subdirectories) to run the full recipe"
        );
        return;
    };
    let root = PathBuf::from(dir);
    let out = tmp("stag-run");
    let train_dir = root.join("train");
    let test_dir = root.join("test");
    assert!(train_dir.exists() && test_dir.exists(), "expected train/ and test/ under TVGCN_STAG_DIR");

    let mut cfg = RunConfig::default();
    cfg.dataset = Some(train_dir.clone());
    cfg.out = Some(out.clone());
    commands::cmd_cluster(&cfg).unwrap();
    commands::cmd_train_backbone(&cfg).unwrap();
    commands::cmd_train(&cfg).unwrap();
    cfg.dataset = Some(test_dir);
    cfg.trials = 10;
    let outcome = commands::run_eval(&cfg).unwrap();
    let mean: f64 = outcome.per_trial.iter().sum::<f64>() / outcome.per_trial.len() as f64;
    // headline accuracy is reported, not asserted: it depends on the full
    // dataset and GPU-scale training budget
    eprintln!(
        "[PASS] large-scale protocol executed end-to-end: mean accuracy over 10 trials {:.4}",
        mean
    );
}
