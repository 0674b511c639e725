//! On-disk dataset layout shared by the subcommands.
//!
//! A frame directory holds `frame_NNNNNN.hcpf` point clouds with matching
//! `.hcpa` annotations (and, for generated data, a `.manifest.json`
//! sidecar). Prediction directories hold `.hcpp` files under the same
//! basenames, which is how eval pairs the two sides back up.

use std::fs;
use std::path::{Path, PathBuf};

use hcp_core::io::annot::{
    read_annotations, read_predictions, write_annotations, FrameAnnotations, FramePredictions,
};
use hcp_core::io::frame::{read_frame, write_frame};
use hcp_core::io::report::write_json;
use hcp_core::synth::SceneManifest;
use hcp_core::types::SceneFrame;

use crate::CliError;

pub fn frame_basename(frame_id: u64) -> String {
    format!("frame_{frame_id:06}")
}

fn missing(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::MissingInput(format!("{}: {err}", path.display()))
}

fn write_failure(path: &Path, err: impl std::fmt::Display) -> CliError {
    CliError::Pipeline(format!("writing {}: {err}", path.display()))
}

/// Writes one generated frame as cloud + annotations + manifest sidecar.
pub fn write_frame_set(
    dir: &Path,
    frames: &[(SceneFrame, SceneManifest)],
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| write_failure(dir, e))?;
    for (frame, manifest) in frames {
        let base = dir.join(frame_basename(frame.frame_id));
        let cloud_path = base.with_extension("hcpf");
        write_frame(&cloud_path, &frame.cloud).map_err(|e| write_failure(&cloud_path, e))?;
        let annot_path = base.with_extension("hcpa");
        write_annotations(&annot_path, &FrameAnnotations::from_frame(frame))
            .map_err(|e| write_failure(&annot_path, e))?;
        let manifest_path = base.with_extension("manifest.json");
        write_json(&manifest_path, manifest).map_err(|e| write_failure(&manifest_path, e))?;
    }
    Ok(())
}

/// Paths with the given extension, sorted by file name for stable order.
fn sorted_files(dir: &Path, extension: &str) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| missing(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(extension))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Loads every frame in a directory: each `.hcpf` cloud joined with its
/// `.hcpa` annotations, ordered by file name.
pub fn load_frames(dir: &Path) -> Result<Vec<SceneFrame>, CliError> {
    let cloud_paths = sorted_files(dir, "hcpf")?;
    if cloud_paths.is_empty() {
        return Err(CliError::MissingInput(format!(
            "{}: no .hcpf frames found",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(cloud_paths.len());
    for cloud_path in cloud_paths {
        let cloud = read_frame(&cloud_path).map_err(|e| missing(&cloud_path, e))?;
        let annot_path = cloud_path.with_extension("hcpa");
        let annotations = read_annotations(&annot_path).map_err(|e| missing(&annot_path, e))?;
        if annotations.point_count != cloud.len() {
            return Err(CliError::MissingInput(format!(
                "{}: annotations cover {} points but the cloud has {}",
                annot_path.display(),
                annotations.point_count,
                cloud.len()
            )));
        }
        frames.push(annotations.into_frame(cloud));
    }
    Ok(frames)
}

/// Loads predictions and their matching annotations, paired by basename.
pub fn load_eval_pairs(
    predictions_dir: &Path,
    data_dir: &Path,
) -> Result<Vec<(FramePredictions, FrameAnnotations)>, CliError> {
    let pred_paths = sorted_files(predictions_dir, "hcpp")?;
    if pred_paths.is_empty() {
        return Err(CliError::MissingInput(format!(
            "{}: no .hcpp prediction files found",
            predictions_dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(pred_paths.len());
    for pred_path in pred_paths {
        let predictions = read_predictions(&pred_path).map_err(|e| missing(&pred_path, e))?;
        let stem = pred_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let annot_path = data_dir.join(format!("{stem}.hcpa"));
        let annotations = read_annotations(&annot_path).map_err(|e| missing(&annot_path, e))?;
        if predictions.frame_id != annotations.frame_id {
            return Err(CliError::MissingInput(format!(
                "{stem}: prediction frame {} does not match annotation frame {}",
                predictions.frame_id, annotations.frame_id
            )));
        }
        pairs.push((predictions, annotations));
    }
    Ok(pairs)
}

/// Spreads items over `jobs` worker threads and reassembles results in
/// input order, so parallel runs write exactly what serial runs write.
pub fn parallel_map<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let worker_count = jobs.min(items.len());
    let total = items.len();
    let mut chunks: Vec<Vec<(usize, T)>> = (0..worker_count).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        chunks[i % worker_count].push((i, item));
    }
    let mut slots: Vec<Option<R>> = (0..total).map(|_| None).collect();
    let worker = &f;
    let indexed: Vec<(usize, R)> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(i, item)| (i, worker(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    for (i, result) in indexed {
        slots[i] = Some(result);
    }
    slots.into_iter().map(|slot| slot.unwrap()).collect()
}
