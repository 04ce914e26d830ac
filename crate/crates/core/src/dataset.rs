//! Tactile dataset ingestion, cleaning, pseudo-viewpoint clustering,
//! view-set sampling and a synthetic generator.
//!
//! On-disk layout of a dataset directory:
//!   manifest.json  - version, counts, class names, calibration, split tag
//!   frames.bin     - magic "TVGF", version u32, count u32, count x 1024 f32
//!   labels.bin     - magic "TVGL", version u32, count u32, count x u16
//!   empty_hand.bin - optional, magic "TVGE", version u32, 1024 f32
//!   clusters.json  - per class: centroid rows, frame->cluster map,
//!                    cluster->viewpoint map (centroid payload in
//!                    centroids.bin, magic "TVGK")
//! All integers and floats little-endian. Frames are stored raw; loading
//! normalizes to [0,1] with the manifest calibration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::rng::Rng;

pub const FRAME_SIDE: usize = 32;
pub const FRAME_CELLS: usize = FRAME_SIDE * FRAME_SIDE;

pub const FRAMES_MAGIC: [u8; 4] = *b"TVGF";
pub const LABELS_MAGIC: [u8; 4] = *b"TVGL";
pub const EMPTY_MAGIC: [u8; 4] = *b"TVGE";
pub const CENTROIDS_MAGIC: [u8; 4] = *b"TVGK";
pub const FORMAT_VERSION: u32 = 1;

/// One normalized 32x32 pressure image.
#[derive(Debug, Clone)]
pub struct TactileFrame {
    pub pressure: Vec<f32>,
    pub label: usize,
    pub cluster_id: Option<usize>,
    pub source_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_frames: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub calib_min: f32,
    pub calib_max: f32,
    pub split: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub frames: Vec<TactileFrame>,
}

impl Dataset {
    pub fn frame_indices_of_class(&self, class: usize) -> Vec<usize> {
        self.frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.label == class)
            .map(|(i, _)| i)
            .collect()
    }
}

// ── binary helpers ──────────────────────────────────────────────────────

fn check_magic(file: &str, bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 8 {
        return Err(DatasetError::Truncated { file: file.into() }.into());
    }
    let got: [u8; 4] = bytes[0..4].try_into().expect("length checked");
    if got != expected {
        return Err(DatasetError::BadMagic {
            file: file.into(),
            expected,
            got,
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
    if version != FORMAT_VERSION {
        return Err(DatasetError::BadVersion {
            file: file.into(),
            expected: FORMAT_VERSION,
            got: version,
        }
        .into());
    }
    Ok(())
}

fn write_frames_bin(path: &Path, frames: &[Vec<f32>]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + frames.len() * FRAME_CELLS * 4);
    out.extend_from_slice(&FRAMES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in frames {
        debug_assert_eq!(f.len(), FRAME_CELLS);
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_frames_bin(path: &Path) -> Result<Vec<Vec<f32>>> {
    let file = path.display().to_string();
    let bytes = std::fs::read(path)?;
    check_magic(&file, &bytes, FRAMES_MAGIC)?;
    if bytes.len() < 12 {
        return Err(DatasetError::Truncated { file }.into());
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked")) as usize;
    let payload = &bytes[12..];
    if payload.len() != count * FRAME_CELLS * 4 {
        return Err(DatasetError::CountMismatch {
            file,
            expected: count,
            got: payload.len() / (FRAME_CELLS * 4),
        }
        .into());
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let chunk = &payload[i * FRAME_CELLS * 4..(i + 1) * FRAME_CELLS * 4];
        let frame: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFinite { file, index: i }.into());
        }
        frames.push(frame);
    }
    Ok(frames)
}

fn write_labels_bin(path: &Path, labels: &[u16]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + labels.len() * 2);
    out.extend_from_slice(&LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for l in labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_labels_bin(path: &Path) -> Result<Vec<u16>> {
    let file = path.display().to_string();
    let bytes = std::fs::read(path)?;
    check_magic(&file, &bytes, LABELS_MAGIC)?;
    let count = u32::from_le_bytes(bytes[8..12].try_into().expect("length checked")) as usize;
    let payload = &bytes[12..];
    if payload.len() != count * 2 {
        return Err(DatasetError::CountMismatch {
            file,
            expected: count,
            got: payload.len() / 2,
        }
        .into());
    }
    Ok(payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_empty_hand(path: &Path, frame: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + FRAME_CELLS * 4);
    out.extend_from_slice(&EMPTY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in frame {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_empty_hand(path: &Path) -> Result<Vec<f32>> {
    let file = path.display().to_string();
    let bytes = std::fs::read(path)?;
    check_magic(&file, &bytes, EMPTY_MAGIC)?;
    let payload = &bytes[8..];
    if payload.len() != FRAME_CELLS * 4 {
        return Err(DatasetError::CountMismatch {
            file,
            expected: 1,
            got: payload.len() / (FRAME_CELLS * 4),
        }
        .into());
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

// ── dataset save / load ─────────────────────────────────────────────────

/// Writes a dataset directory. Frames are stored as given (raw values);
/// the manifest calibration describes how to normalize them at load time.
pub fn save_dataset(
    dir: &Path,
    manifest: &DatasetManifest,
    frames_raw: &[Vec<f32>],
    labels: &[u16],
) -> Result<()> {
    if frames_raw.len() != manifest.num_frames || labels.len() != manifest.num_frames {
        return Err(DatasetError::CountMismatch {
            file: "save_dataset".into(),
            expected: manifest.num_frames,
            got: frames_raw.len(),
        }
        .into());
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    write_frames_bin(&dir.join("frames.bin"), frames_raw)?;
    write_labels_bin(&dir.join("labels.bin"), labels)?;
    Ok(())
}

/// Loads and validates a dataset directory; frames come back normalized to
/// [0,1] via the manifest calibration.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    if manifest.version != FORMAT_VERSION {
        return Err(DatasetError::BadVersion {
            file: manifest_path.display().to_string(),
            expected: FORMAT_VERSION,
            got: manifest.version,
        }
        .into());
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(DatasetError::Other(format!(
            "manifest lists {} class names for {} classes",
            manifest.class_names.len(),
            manifest.num_classes
        ))
        .into());
    }
    if manifest.calib_max <= manifest.calib_min {
        return Err(DatasetError::Other(format!(
            "bad calibration range [{}, {}]",
            manifest.calib_min, manifest.calib_max
        ))
        .into());
    }

    let frames_raw = read_frames_bin(&dir.join("frames.bin"))?;
    if frames_raw.len() != manifest.num_frames {
        return Err(DatasetError::CountMismatch {
            file: "frames.bin vs manifest".into(),
            expected: manifest.num_frames,
            got: frames_raw.len(),
        }
        .into());
    }
    let labels = read_labels_bin(&dir.join("labels.bin"))?;
    if labels.len() != manifest.num_frames {
        return Err(DatasetError::CountMismatch {
            file: "labels.bin vs manifest".into(),
            expected: manifest.num_frames,
            got: labels.len(),
        }
        .into());
    }

    let range = manifest.calib_max - manifest.calib_min;
    let mut frames = Vec::with_capacity(frames_raw.len());
    for (i, raw) in frames_raw.into_iter().enumerate() {
        let label = labels[i] as usize;
        if label >= manifest.num_classes {
            return Err(DatasetError::LabelOutOfRange {
                label,
                num_classes: manifest.num_classes,
                index: i,
            }
            .into());
        }
        let pressure: Vec<f32> = raw
            .into_iter()
            .map(|v| ((v - manifest.calib_min) / range).clamp(0.0, 1.0))
            .collect();
        frames.push(TactileFrame {
            pressure,
            label,
            cluster_id: None,
            source_index: i,
        });
    }
    Ok(Dataset { manifest, frames })
}

// ── preprocessing ───────────────────────────────────────────────────────

/// Isolates hand-object contact: max(frame - empty_hand, 0), scaled by the
/// calibration range and clipped to [0,1].
pub fn baseline_subtract(
    frame_raw: &[f32],
    empty_hand_raw: &[f32],
    calib_min: f32,
    calib_max: f32,
) -> Result<Vec<f32>> {
    if frame_raw.len() != FRAME_CELLS || empty_hand_raw.len() != FRAME_CELLS {
        return Err(Error::ShapeMismatch {
            op: "baseline_subtract",
            lhs: vec![frame_raw.len()],
            rhs: vec![empty_hand_raw.len()],
        });
    }
    let range = calib_max - calib_min;
    if range <= 0.0 {
        return Err(Error::config("baseline_subtract", "calibration range empty"));
    }
    Ok(frame_raw
        .iter()
        .zip(empty_hand_raw)
        .map(|(f, e)| ((f - e).max(0.0) / range).clamp(0.0, 1.0))
        .collect())
}

pub const DEFAULT_MIN_ACTIVE: usize = 10;
pub const DEFAULT_ACTIVE_THRESHOLD: f32 = 0.05;

/// Keeps frames with at least `min_active` cells above `active_threshold`.
pub fn filter_informative(
    frames: Vec<TactileFrame>,
    min_active: usize,
    active_threshold: f32,
) -> Vec<TactileFrame> {
    frames
        .into_iter()
        .filter(|f| {
            f.pressure.iter().filter(|v| **v > active_threshold).count() >= min_active
        })
        .collect()
}

// ── clustering ──────────────────────────────────────────────────────────

/// k-means result for one class. `assignments` aligns with the input frame
/// slice; `cluster_to_viewpoint[c]` is the viewpoint index of cluster c
/// (clusters ranked by descending size).
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f32>>,
    pub cluster_to_viewpoint: Vec<usize>,
    pub objective_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn members_of_cluster(&self, cluster: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cluster_of_viewpoint(&self, viewpoint: usize) -> Option<usize> {
        self.cluster_to_viewpoint.iter().position(|v| *v == viewpoint)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        s += d * d;
    }
    s
}

/// Lloyd's k-means with k-means++ seeding over flattened frames.
/// Deterministic for a fixed seed; stops when the largest centroid shift
/// falls below 1e-4 or after 100 iterations. Clusters are mapped to
/// viewpoints by descending size (ties to the lower cluster index).
pub fn cluster_frames(frames: &[&[f32]], k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = frames.len();
    if k == 0 {
        return Err(Error::config("cluster_frames", "k must be >= 1"));
    }
    if n < k {
        return Err(DatasetError::TooFewFrames {
            class: usize::MAX,
            have: n,
            need: k,
        }
        .into());
    }
    let mut rng = Rng::seed_stream(seed, 0x6b6d65616e73); // "kmeans"

    // k-means++ seeding
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    let first = rng.next_usize(n);
    centroids.push(frames[first].to_vec());
    let mut d2: Vec<f64> = frames.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.next_usize(n)
        } else {
            let mut target = rng.next_f64() * total;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(frames[pick].to_vec());
        for (i, f) in frames.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, centroids.last().expect("just pushed")));
        }
    }

    let dim = frames[0].len();
    let mut assignments = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..100 {
        // assignment step
        let mut objective = 0.0;
        for (i, f) in frames.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sq_dist(f, &centroids[0]);
            for (c, cent) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(f, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
            objective += best_d;
        }
        history.push(objective);

        // update step
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in frames.iter().enumerate() {
            counts[assignments[i]] += 1;
            for (s, v) in sums[assignments[i]].iter_mut().zip(*f) {
                *s += *v as f64;
            }
        }
        // an empty cluster steals the point farthest from its centroid
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(frames[a], &centroids[assignments[a]])
                            .partial_cmp(&sq_dist(frames[b], &centroids[assignments[b]]))
                            .expect("finite")
                    })
                    .expect("n >= k >= 1");
                counts[assignments[far]] -= 1;
                for (s, v) in sums[assignments[far]].iter_mut().zip(frames[far]) {
                    *s -= *v as f64;
                }
                assignments[far] = c;
                counts[c] = 1;
                for (s, v) in sums[c].iter_mut().zip(frames[far]) {
                    *s = *v as f64;
                }
            }
        }

        let mut max_shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut shift = 0.0;
            for (j, s) in sums[c].iter().enumerate() {
                let nv = (s * inv) as f32;
                let d = (nv - centroids[c][j]) as f64;
                shift += d * d;
                centroids[c][j] = nv;
            }
            max_shift = max_shift.max(shift.sqrt());
        }
        if max_shift < 1e-4 {
            break;
        }
    }

    // final assignment against the converged centroids
    let mut objective = 0.0;
    for (i, f) in frames.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = sq_dist(f, &centroids[0]);
        for (c, cent) in centroids.iter().enumerate().skip(1) {
            let d = sq_dist(f, cent);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        objective += best_d;
    }
    history.push(objective);

    // rank clusters by descending size for the viewpoint mapping
    let mut sizes = vec![0usize; k];
    for &a in &assignments {
        sizes[a] += 1;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| sizes[*b].cmp(&sizes[*a]).then(a.cmp(b)));
    let mut cluster_to_viewpoint = vec![0usize; k];
    for (vp, &cluster) in order.iter().enumerate() {
        cluster_to_viewpoint[cluster] = vp;
    }

    Ok(ClusterAssignment {
        k,
        assignments,
        centroids,
        cluster_to_viewpoint,
        objective_history: history,
    })
}

/// Draws one frame per cluster, ordered by viewpoint index. Returned values
/// are positions into the frame slice that produced the assignment.
pub fn sample_view_set(
    assignment: &ClusterAssignment,
    rng: &mut Rng,
) -> std::result::Result<Vec<usize>, DatasetError> {
    let mut out = Vec::with_capacity(assignment.k);
    for vp in 0..assignment.k {
        let cluster = assignment
            .cluster_of_viewpoint(vp)
            .expect("mapping is a bijection");
        let members = assignment.members_of_cluster(cluster);
        if members.is_empty() {
            return Err(DatasetError::EmptyCluster {
                class: usize::MAX,
                cluster,
            });
        }
        out.push(members[rng.next_usize(members.len())]);
    }
    Ok(out)
}

// ── cluster persistence ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassClustersRecord {
    pub class: usize,
    /// [first_row, row_count] into centroids.bin.
    pub centroid_rows: [usize; 2],
    /// Global dataset frame indices of this class, in dataset order.
    pub frame_indices: Vec<usize>,
    /// Cluster id per entry of `frame_indices`.
    pub cluster_of: Vec<usize>,
    pub cluster_to_viewpoint: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClustersFile {
    pub version: u32,
    pub k: usize,
    pub seed: u64,
    pub classes: Vec<ClassClustersRecord>,
}

pub fn save_clusters(
    dir: &Path,
    k: usize,
    seed: u64,
    per_class: &[(usize, Vec<usize>, ClusterAssignment)],
) -> Result<()> {
    let mut records = Vec::with_capacity(per_class.len());
    let mut all_centroids: Vec<Vec<f32>> = Vec::new();
    for (class, frame_indices, assignment) in per_class {
        let first = all_centroids.len();
        all_centroids.extend(assignment.centroids.iter().cloned());
        records.push(ClassClustersRecord {
            class: *class,
            centroid_rows: [first, assignment.centroids.len()],
            frame_indices: frame_indices.clone(),
            cluster_of: assignment.assignments.clone(),
            cluster_to_viewpoint: assignment.cluster_to_viewpoint.clone(),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CENTROIDS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(all_centroids.len() as u32).to_le_bytes());
    for c in &all_centroids {
        for v in c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(dir.join("centroids.bin"), out)?;
    let file = ClustersFile {
        version: FORMAT_VERSION,
        k,
        seed,
        classes: records,
    };
    std::fs::write(
        dir.join("clusters.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    Ok(())
}

pub fn load_clusters(dir: &Path) -> Result<ClustersFile> {
    let path = dir.join("clusters.json");
    let file: ClustersFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    if file.version != FORMAT_VERSION {
        return Err(DatasetError::BadVersion {
            file: path.display().to_string(),
            expected: FORMAT_VERSION,
            got: file.version,
        }
        .into());
    }
    Ok(file)
}

// ── synthetic data ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma: f64,
    amp: f64,
}

fn render(blobs: &[Blob]) -> Vec<f32> {
    let mut img = vec![0.0f32; FRAME_CELLS];
    for b in blobs {
        // beyond 3 sigma the contribution is negligible
        let reach = (3.0 * b.sigma).ceil() as isize;
        let (cx, cy) = (b.cx.round() as isize, b.cy.round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(FRAME_SIDE as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(FRAME_SIDE as isize - 1) {
                let dx = x as f64 - b.cx;
                let dy = y as f64 - b.cy;
                let v = b.amp * (-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma)).exp();
                img[y as usize * FRAME_SIDE + x as usize] += v as f32;
            }
        }
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Per-class template: 2-4 Gaussian pressure blobs, re-drawn until the
/// rendered template is at least 4.0 apart (L2) from every earlier class.
fn class_templates(num_classes: usize, seed: u64) -> Vec<Vec<Blob>> {
    let mut templates: Vec<Vec<Blob>> = Vec::with_capacity(num_classes);
    let mut rendered: Vec<Vec<f32>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut best: Option<(f64, Vec<Blob>, Vec<f32>)> = None;
        for attempt in 0..50u64 {
            let mut rng = Rng::seed_stream(seed, 0x7431 + class as u64 * 1009 + attempt * 7919);
            let n_blobs = 2 + rng.next_usize(3);
            let blobs: Vec<Blob> = (0..n_blobs)
                .map(|_| Blob {
                    cx: rng.uniform(6.0, 26.0),
                    cy: rng.uniform(6.0, 26.0),
                    sigma: rng.uniform(1.8, 3.0),
                    amp: rng.uniform(0.6, 1.0),
                })
                .collect();
            let img = render(&blobs);
            let min_sep = rendered
                .iter()
                .map(|r| l2(r, &img))
                .fold(f64::INFINITY, f64::min);
            if min_sep >= 4.0 {
                best = Some((min_sep, blobs, img));
                break;
            }
            match &best {
                Some((sep, _, _)) if *sep >= min_sep => {}
                _ => best = Some((min_sep, blobs, img)),
            }
        }
        let (_, blobs, img) = best.expect("at least one attempt");
        templates.push(blobs);
        rendered.push(img);
    }
    templates
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub frames: Vec<Vec<f32>>,
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

/// Synthetic desk-scale dataset: each class is a fixed blob arrangement,
/// each frame jitters blob positions by up to 2 cells and amplitudes by
/// 20%, then adds sigma = 0.02 noise. Values clipped to [0,1].
pub fn synth_generate(num_classes: usize, frames_per_class: usize, seed: u64) -> Result<SynthData> {
    if num_classes < 2 {
        return Err(Error::config(
            "synth_generate",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    let templates = class_templates(num_classes, seed);
    let mut frames = Vec::with_capacity(num_classes * frames_per_class);
    let mut labels = Vec::with_capacity(num_classes * frames_per_class);
    for (class, template) in templates.iter().enumerate() {
        let mut rng = Rng::seed_stream(seed, 0xf7a3 + class as u64);
        for _ in 0..frames_per_class {
            let jittered: Vec<Blob> = template
                .iter()
                .map(|b| Blob {
                    cx: b.cx + rng.uniform(-2.0, 2.0),
                    cy: b.cy + rng.uniform(-2.0, 2.0),
                    sigma: b.sigma,
                    amp: b.amp * rng.uniform(0.8, 1.2),
                })
                .collect();
            let mut img = render(&jittered);
            for v in img.iter_mut() {
                *v = (*v + (rng.normal() * 0.02) as f32).clamp(0.0, 1.0);
            }
            frames.push(img);
            labels.push(class as u16);
        }
    }
    Ok(SynthData {
        frames,
        labels,
        num_classes,
    })
}

pub fn synth_manifest(num_classes: usize, num_frames: usize, split: &str) -> DatasetManifest {
    DatasetManifest {
        version: FORMAT_VERSION,
        num_frames,
        num_classes,
        class_names: (0..num_classes).map(|c| format!("object_{c:02}")).collect(),
        calib_min: 0.0,
        calib_max: 1.0,
        split: split.to_string(),
    }
}

/// Generates and writes `<dir>/train` and `<dir>/test` with a stratified
/// 3:1 split.
pub fn write_synth_splits(
    dir: &Path,
    num_classes: usize,
    frames_per_class: usize,
    seed: u64,
) -> Result<(usize, usize)> {
    let data = synth_generate(num_classes, frames_per_class, seed)?;
    let train_per_class = (frames_per_class * 3).div_ceil(4);
    let mut train_frames = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_frames = Vec::new();
    let mut test_labels = Vec::new();
    for class in 0..num_classes {
        let base = class * frames_per_class;
        for i in 0..frames_per_class {
            let (frames, labels) = if i < train_per_class {
                (&mut train_frames, &mut train_labels)
            } else {
                (&mut test_frames, &mut test_labels)
            };
            frames.push(data.frames[base + i].clone());
            labels.push(data.labels[base + i]);
        }
    }
    save_dataset(
        &dir.join("train"),
        &synth_manifest(num_classes, train_frames.len(), "train"),
        &train_frames,
        &train_labels,
    )?;
    save_dataset(
        &dir.join("test"),
        &synth_manifest(num_classes, test_frames.len(), "test"),
        &test_frames,
        &test_labels,
    )?;
    Ok((train_frames.len(), test_frames.len()))
}
