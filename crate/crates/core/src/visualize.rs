//! Gray-scale export of learned dependency structures and block-contrast
//! scoring against planted events.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{block_contrast, Dataset, PlantedAnnotation};
use crate::error::{Result, TdnError};
use crate::linalg::Matrix;
use crate::model::{forward, TdnModel};

/// Binary PGM (P5): zero is black, the matrix maximum is white.
///
/// Pixel `(i, j)` is `round(255 · S[i,j] / max S)`; an all-zero (or
/// non-positive) matrix encodes as all-black. No comment line is written.
pub fn encode_pgm(s: &Matrix) -> Result<Vec<u8>> {
    if s.rows() != s.cols() {
        return Err(TdnError::shape("encode_pgm", s.shape(), (s.cols(), s.rows())));
    }
    let n = s.rows();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    let max = s.max().unwrap_or(0.0);
    out.reserve(n * n);
    for &v in s.as_slice() {
        let px = if max > 0.0 {
            (255.0 * v / max).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.push(px);
    }
    Ok(out)
}

/// Writes `adj_<video>_<k>.pgm` for every head (k counted from 1) and
/// returns the paths.
pub fn export_adjacency(
    model: &TdnModel,
    dataset: &Dataset,
    video: usize,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let sample = dataset.samples.get(video).ok_or_else(|| {
        TdnError::validation(format!("video index {video} out of range for {} videos", dataset.len()))
    })?;
    let trace = forward(model, &sample.features)?;
    fs::create_dir_all(out_dir.as_ref())?;
    let mut paths = Vec::new();
    for (k, s) in trace.normalized().iter().enumerate() {
        let path = out_dir.as_ref().join(format!("adj_{video}_{}.pgm", k + 1));
        fs::write(&path, encode_pgm(s)?)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Block contrast of every head, averaged over the videos that contain at
/// least two events. Entry `k` belongs to head `k`.
pub fn head_block_contrast(model: &TdnModel, dataset: &Dataset, annotation: &PlantedAnnotation) -> Result<Vec<f64>> {
    if annotation.videos.len() != dataset.len() {
        return Err(TdnError::validation(format!(
            "annotation covers {} videos, dataset has {}",
            annotation.videos.len(),
            dataset.len()
        )));
    }
    let mut sums = vec![0.0; model.config.heads];
    let mut counted = 0usize;
    for (sample, ann) in dataset.samples.iter().zip(&annotation.videos) {
        if ann.event_prototypes.len() < 2 {
            continue;
        }
        let trace = forward(model, &sample.features)?;
        for (acc, s) in sums.iter_mut().zip(trace.normalized()) {
            *acc += block_contrast(s, &ann.frame_events)?;
        }
        counted += 1;
    }
    if counted == 0 {
        return Err(TdnError::validation("no annotated video has two or more events"));
    }
    Ok(sums.into_iter().map(|s| s / counted as f64).collect())
}

/// Highest per-head mean block contrast and the head that achieves it.
pub fn best_head_contrast(model: &TdnModel, dataset: &Dataset, annotation: &PlantedAnnotation) -> Result<(usize, f64)> {
    let per_head = head_block_contrast(model, dataset, annotation)?;
    Ok(per_head
        .into_iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best }))
}
