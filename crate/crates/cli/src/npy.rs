//! Best-effort ingestion of NPY-exported pressure recordings into the
//! dataset directory layout (feature `stag`).
//!
//! Expects a [N,32,32] or [N,1024] pressure array and an [N] integer label
//! array; an optional empty-hand frame is subtracted before normalization,
//! and uninformative frames are dropped with the default thresholds.

use std::path::{Path, PathBuf};

use tvgcn_core::dataset::{
    self, baseline_subtract, filter_informative, DatasetManifest, TactileFrame,
    DEFAULT_ACTIVE_THRESHOLD, DEFAULT_MIN_ACTIVE, FORMAT_VERSION, FRAME_CELLS,
};
use tvgcn_core::error::{Error, Result};

use crate::config::RunConfig;

#[derive(Debug, Clone, clap::Args)]
pub struct ConvertArgs {
    /// NPY file with pressure frames, shape [N,32,32] or [N,1024].
    #[arg(long)]
    pub pressure: PathBuf,
    /// NPY file with integer labels, shape [N].
    #[arg(long)]
    pub labels: PathBuf,
    /// Optional NPY file with one empty-hand frame, shape [32,32] or [1024].
    #[arg(long)]
    pub empty_hand: Option<PathBuf>,
    /// Split tag recorded in the manifest.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Skip the informative-frame filter.
    #[arg(long, default_value_t = false)]
    pub keep_all: bool,
}

#[derive(Debug)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Minimal NPY (v1/v2) reader for the numeric dtypes the exports use.
pub fn read_npy(path: &Path) -> Result<NpyArray> {
    let bytes = std::fs::read(path)?;
    parse_npy(&bytes).map_err(|msg| Error::config("npy", format!("{}: {msg}", path.display())))
}

pub fn parse_npy(bytes: &[u8]) -> std::result::Result<NpyArray, String> {
    if bytes.len() < 10 || &bytes[0..6] != b"\x93NUMPY" {
        return Err("not an NPY file".into());
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (
            u16::from_le_bytes([bytes[8], bytes[9]]) as usize,
            10usize,
        ),
        2 => {
            if bytes.len() < 12 {
                return Err("truncated header".into());
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12usize,
            )
        }
        v => return Err(format!("unsupported NPY version {v}")),
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err("truncated header".into());
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| "header is not ASCII".to_string())?;

    let descr = extract_quoted(header, "descr").ok_or("missing descr")?;
    let fortran = header
        .split("fortran_order")
        .nth(1)
        .map(|s| s.contains("True"))
        .unwrap_or(false);
    if fortran {
        return Err("fortran-order arrays are not supported".into());
    }
    let shape = extract_shape(header).ok_or("missing shape")?;
    let numel: usize = shape.iter().product();

    let payload = &bytes[header_end..];
    let data = decode(descr.as_str(), payload, numel)?;
    Ok(NpyArray { shape, data })
}

fn extract_quoted(header: &str, key: &str) -> Option<String> {
    let at = header.find(key)?;
    let rest = &header[at + key.len()..];
    let colon = rest.find(':')?;
    let rest = &rest[colon + 1..];
    let open = rest.find('\'')? + 1;
    let close = rest[open..].find('\'')? + open;
    Some(rest[open..close].to_string())
}

fn extract_shape(header: &str) -> Option<Vec<usize>> {
    let at = header.find("shape")?;
    let rest = &header[at..];
    let open = rest.find('(')? + 1;
    let close = rest.find(')')?;
    let inner = &rest[open..close];
    let mut out = Vec::new();
    for part in inner.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(part.parse().ok()?);
    }
    Some(out)
}

fn decode(descr: &str, payload: &[u8], numel: usize) -> std::result::Result<Vec<f64>, String> {
    macro_rules! take {
        ($width:expr, $conv:expr) => {{
            if payload.len() < numel * $width {
                return Err("payload shorter than shape".into());
            }
            payload
                .chunks_exact($width)
                .take(numel)
                .map($conv)
                .collect()
        }};
    }
    Ok(match descr {
        "<f4" => take!(4, |c: &[u8]| f32::from_le_bytes(c.try_into().unwrap()) as f64),
        "<f8" => take!(8, |c: &[u8]| f64::from_le_bytes(c.try_into().unwrap())),
        "<i2" => take!(2, |c: &[u8]| i16::from_le_bytes(c.try_into().unwrap()) as f64),
        "<i4" => take!(4, |c: &[u8]| i32::from_le_bytes(c.try_into().unwrap()) as f64),
        "<i8" => take!(8, |c: &[u8]| i64::from_le_bytes(c.try_into().unwrap()) as f64),
        "<u2" => take!(2, |c: &[u8]| u16::from_le_bytes(c.try_into().unwrap()) as f64),
        "<u4" => take!(4, |c: &[u8]| u32::from_le_bytes(c.try_into().unwrap()) as f64),
        "|u1" => take!(1, |c: &[u8]| c[0] as f64),
        other => return Err(format!("unsupported dtype {other}")),
    })
}

pub fn cmd_convert_stag(cfg: &RunConfig, args: &ConvertArgs) -> Result<()> {
    let out = cfg.out_dir()?;
    let pressure = read_npy(&args.pressure)?;
    let labels = read_npy(&args.labels)?;

    let frames_count = match pressure.shape.as_slice() {
        [n, 32, 32] => *n,
        [n, 1024] => *n,
        other => {
            return Err(Error::config(
                "convert-stag",
                format!("pressure shape {other:?}, expected [N,32,32] or [N,1024]"),
            ))
        }
    };
    if labels.shape != [frames_count] {
        return Err(Error::config(
            "convert-stag",
            format!(
                "labels shape {:?} does not match {frames_count} frames",
                labels.shape
            ),
        ));
    }

    let empty = match &args.empty_hand {
        Some(path) => {
            let arr = read_npy(path)?;
            if arr.data.len() != FRAME_CELLS {
                return Err(Error::config(
                    "convert-stag",
                    format!("empty-hand shape {:?}, expected 1024 values", arr.shape),
                ));
            }
            arr.data.iter().map(|v| *v as f32).collect()
        }
        None => vec![0.0f32; FRAME_CELLS],
    };

    // calibration from the observed post-subtraction range
    let mut calib_max = f32::MIN;
    for (i, chunk) in pressure.data.chunks_exact(FRAME_CELLS).enumerate() {
        for (v, e) in chunk.iter().zip(&empty) {
            let d = (*v as f32 - e).max(0.0);
            if !d.is_finite() {
                return Err(Error::config(
                    "convert-stag",
                    format!("non-finite pressure in frame {i}"),
                ));
            }
            calib_max = calib_max.max(d);
        }
    }
    if !(calib_max > 0.0) {
        return Err(Error::config("convert-stag", "all frames empty after subtraction"));
    }

    let num_classes = labels
        .data
        .iter()
        .map(|l| *l as usize)
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let mut frames = Vec::with_capacity(frames_count);
    for (i, chunk) in pressure.data.chunks_exact(FRAME_CELLS).enumerate() {
        let raw: Vec<f32> = chunk.iter().map(|v| *v as f32).collect();
        let normalized = baseline_subtract(&raw, &empty, 0.0, calib_max)?;
        frames.push(TactileFrame {
            pressure: normalized,
            label: labels.data[i] as usize,
            cluster_id: None,
            source_index: i,
        });
    }
    let kept = if args.keep_all {
        frames
    } else {
        filter_informative(frames, DEFAULT_MIN_ACTIVE, DEFAULT_ACTIVE_THRESHOLD)
    };

    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        num_frames: kept.len(),
        num_classes,
        class_names: (0..num_classes).map(|c| format!("object_{c:02}")).collect(),
        calib_min: 0.0,
        calib_max: 1.0,
        split: args.split.clone(),
    };
    let payload: Vec<Vec<f32>> = kept.iter().map(|f| f.pressure.clone()).collect();
    let label_payload: Vec<u16> = kept.iter().map(|f| f.label as u16).collect();
    dataset::save_dataset(out, &manifest, &payload, &label_payload)?;
    println!(
        "convert-stag: wrote {} frames ({} dropped as uninformative) to {}",
        kept.len(),
        frames_count - kept.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_npy(descr: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
        let header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
        let mut padded = header.into_bytes();
        while (10 + padded.len()) % 64 != 0 {
            padded.push(b' ');
        }
        let mut out = b"\x93NUMPY\x01\x00".to_vec();
        out.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        out.extend_from_slice(&padded);
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn parses_f4_arrays() {
        let values = [1.0f32, 2.5, -3.0, 0.25, 9.0, -1.5];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_npy("<f4", "(2, 3)", &payload);
        let arr = parse_npy(&bytes).unwrap();
        assert_eq!(arr.shape, vec![2, 3]);
        assert_eq!(arr.data, values.iter().map(|v| *v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn parses_i8_vector() {
        let values = [0i64, 3, 25];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_npy("<i8", "(3,)", &payload);
        let arr = parse_npy(&bytes).unwrap();
        assert_eq!(arr.shape, vec![3]);
        assert_eq!(arr.data, vec![0.0, 3.0, 25.0]);
    }

    #[test]
    fn rejects_garbage_and_fortran_order() {
        assert!(parse_npy(b"not numpy at all").is_err());
        let payload = [0u8; 4];
        let header = "{'descr': '<f4', 'fortran_order': True, 'shape': (1,), }";
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&payload);
        assert!(parse_npy(&bytes).is_err());
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = build_npy("<f4", "(4,)", &[0u8; 8]);
        assert!(parse_npy(&bytes).is_err());
    }
}
